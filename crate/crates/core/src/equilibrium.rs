//! Stationary operating points.
//!
//! Equilibria are expressed in the frame co-rotating with the common
//! frequency. With a slack node (or an infinite grid) that frame is the
//! reference frame and all frequencies vanish. Without a slack node the
//! common frequency `omega_bar` is an unknown; it is stored in every entry of
//! `state.omega` and is zero whenever the desired powers balance at
//! `omega_d = 0`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{injection_jacobian, power_injections, GridNetwork, Line};
use crate::linalg::polynomial_roots;
use crate::model::{InverterParams, SystemState};

/// Convergence threshold of the Newton solver (max-norm of the residual).
pub const NEWTON_TOL: f64 = 1e-10;
/// Post-hoc acceptance threshold for any returned equilibrium.
pub const ACCEPT_TOL: f64 = 1e-8;
pub const MAX_NEWTON_ITER: usize = 50;

const REAL_ROOT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    AnalyticQuartic,
    Newton,
}

/// A stationary state together with how it was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    #[serde(flatten)]
    pub state: SystemState,
    pub residual_norm: f64,
    pub method: Method,
    pub slack: Option<usize>,
    /// Newton iterations used (zero for analytic solutions).
    #[serde(default)]
    pub iterations: usize,
}

impl Equilibrium {
    /// Common frequency of the co-rotating frame.
    pub fn sync_frequency(&self) -> f64 {
        self.state.omega.first().copied().unwrap_or(0.0)
    }
}

fn check_inputs(state: &SystemState, params: &InverterParams, net: &GridNetwork, slack: Option<usize>) -> Result<()> {
    let n = net.len();
    state.check_len(n)?;
    params.validate(n)?;
    if let Some(s) = slack {
        if s >= n {
            return Err(Error::InvalidConfig(format!("slack node {s} outside 0..{n}")));
        }
    }
    Ok(())
}

/// Stationarity residuals for all non-slack nodes, stacked as
/// `[frequency rows, voltage rows]`:
///
/// ```text
/// f_j = omega_d - omega_j + kappa_j (Pd_j - P_j)
/// g_j = Ed_j - E_j + chi_j (Qd_j - Q_j)
/// ```
pub fn residual(
    state: &SystemState,
    params: &InverterParams,
    net: &GridNetwork,
    slack: Option<usize>,
) -> Result<Vec<f64>> {
    check_inputs(state, params, net, slack)?;
    let n = net.len();
    let (p, q) = power_injections(state, net)?;
    let rows: Vec<usize> = (0..n).filter(|&j| Some(j) != slack).collect();
    let mut r = Vec::with_capacity(2 * rows.len());
    for &j in &rows {
        r.push(params.omega_d - state.omega[j] + params.kappa[j] * (params.pd[j] - p[j]));
    }
    for &j in &rows {
        r.push(params.ed[j] - state.e[j] + params.chi[j] * (params.qd[j] - q[j]));
    }
    Ok(r)
}

/// Max-norm of [`residual`], extended by the requirement that all nodes
/// share one frequency (zero when a slack node fixes the frame).
pub fn residual_norm(
    state: &SystemState,
    params: &InverterParams,
    net: &GridNetwork,
    slack: Option<usize>,
) -> Result<f64> {
    let r = residual(state, params, net, slack)?;
    let reference = match slack {
        Some(_) => 0.0,
        None => state.omega[0],
    };
    let spread = state
        .omega
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != slack)
        .map(|(_, w)| (w - reference).abs())
        .fold(0.0, f64::max);
    Ok(r.iter().fold(spread, |acc, x| acc.max(x.abs())))
}

/// Bookkeeping of Newton unknowns: angles (minus gauge), voltages and, in
/// the slack-free case, the common frequency.
struct Layout {
    rows: Vec<usize>,
    angles: Vec<usize>,
    voltages: Vec<usize>,
    free_frequency: bool,
}

impl Layout {
    fn new(n: usize, slack: Option<usize>) -> Self {
        let rows: Vec<usize> = (0..n).filter(|&j| Some(j) != slack).collect();
        let pinned = slack.unwrap_or(0);
        let angles = (0..n).filter(|&j| j != pinned).collect();
        Layout {
            voltages: rows.clone(),
            rows,
            angles,
            free_frequency: slack.is_none(),
        }
    }

    fn unknowns(&self) -> usize {
        self.angles.len() + self.voltages.len() + usize::from(self.free_frequency)
    }

    fn apply(&self, state: &SystemState, step: &DVector<f64>, alpha: f64) -> SystemState {
        let mut s = state.clone();
        let na = self.angles.len();
        for (k, &j) in self.angles.iter().enumerate() {
            s.delta[j] += alpha * step[k];
        }
        for (k, &j) in self.voltages.iter().enumerate() {
            s.e[j] += alpha * step[na + k];
        }
        if self.free_frequency {
            let w = s.omega[0] + alpha * step[na + self.voltages.len()];
            s.omega.iter_mut().for_each(|x| *x = w);
        }
        s
    }

    fn jacobian(&self, state: &SystemState, params: &InverterParams, net: &GridNetwork) -> Result<DMatrix<f64>> {
        let inj = injection_jacobian(state, net)?;
        let m = self.rows.len();
        let na = self.angles.len();
        let nv = self.voltages.len();
        let mut jac = DMatrix::zeros(2 * m, self.unknowns());
        for (r, &j) in self.rows.iter().enumerate() {
            for (c, &l) in self.angles.iter().enumerate() {
                jac[(r, c)] = -params.kappa[j] * inj.dp_ddelta[(j, l)];
                jac[(m + r, c)] = -params.chi[j] * inj.dq_ddelta[(j, l)];
            }
            for (c, &l) in self.voltages.iter().enumerate() {
                jac[(r, na + c)] = -params.kappa[j] * inj.dp_de[(j, l)];
                jac[(m + r, na + c)] = -params.chi[j] * inj.dq_de[(j, l)] - if j == l { 1.0 } else { 0.0 };
            }
            if self.free_frequency {
                jac[(r, na + nv)] = -1.0;
            }
        }
        Ok(jac)
    }
}

fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Flat start: zero angles, desired voltages, and for slack-free systems the
/// lossless estimate of the common frequency.
pub fn flat_start(params: &InverterParams, slack: Option<usize>) -> SystemState {
    let n = params.len();
    let mut s = SystemState {
        delta: vec![0.0; n],
        omega: vec![0.0; n],
        e: params.ed.clone(),
    };
    if slack.is_none() {
        let inv_k: f64 = params.kappa.iter().map(|k| 1.0 / k).sum();
        let w = params.omega_d + params.pd.iter().sum::<f64>() / inv_k;
        s.omega.iter_mut().for_each(|x| *x = w);
    }
    s
}

/// Damped Newton iteration on the stationarity conditions.
///
/// With a slack node, its angle is held at zero and its voltage at its
/// desired value `Ed`; its rows and columns are excluded. Without a slack
/// node the angle of node 0 is pinned to zero and the common frequency is
/// solved for.
pub fn solve_newton(
    net: &GridNetwork,
    params: &InverterParams,
    slack: Option<usize>,
    init: Option<&SystemState>,
) -> Result<Equilibrium> {
    let n = net.len();
    let mut state = match init {
        Some(s) => s.clone(),
        None => flat_start(params, slack),
    };
    check_inputs(&state, params, net, slack)?;
    match slack {
        Some(s) => {
            state.delta[s] = 0.0;
            state.e[s] = params.ed[s];
            state.omega.iter_mut().for_each(|w| *w = 0.0);
        }
        None => {
            let shift = state.delta[0];
            state.delta.iter_mut().for_each(|d| *d -= shift);
            let w = state.omega[0];
            state.omega.iter_mut().for_each(|x| *x = w);
        }
    }
    if state.e.iter().any(|&e| e <= 0.0) {
        return Err(Error::InvalidConfig("initial voltages must be positive".into()));
    }
    let layout = Layout::new(n, slack);

    let mut r = residual(&state, params, net, slack)?;
    let mut norm = max_abs(&r);
    for iteration in 0..=MAX_NEWTON_ITER {
        if norm < NEWTON_TOL {
            let residual_norm = residual_norm(&state, params, net, slack)?;
            if residual_norm >= ACCEPT_TOL {
                return Err(Error::Consistency(format!(
                    "converged iterate fails residual re-check ({residual_norm:.3e})"
                )));
            }
            return Ok(Equilibrium {
                state,
                residual_norm,
                method: Method::Newton,
                slack,
                iterations: iteration,
            });
        }
        if iteration == MAX_NEWTON_ITER {
            break;
        }
        let jac = layout.jacobian(&state, params, net)?;
        let lu = jac.lu();
        let pivots = lu.u().diagonal();
        let pmax = pivots.amax();
        let pmin = pivots.iter().fold(f64::INFINITY, |acc, x| acc.min(x.abs()));
        let step = if pmin > 1e-13 * pmax.max(1.0) {
            lu.solve(&(-DVector::from_vec(r.clone())))
        } else {
            None
        };
        let Some(step) = step else {
            return Err(Error::SingularJacobian {
                iteration,
                delta: state.delta.clone(),
                voltage: state.e.clone(),
            });
        };

        // backtracking on the squared residual, keeping voltages positive
        let merit = sum_sq(&r);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let trial = layout.apply(&state, &step, alpha);
            if trial.e.iter().all(|&e| e > 0.0) {
                let rt = residual(&trial, params, net, slack)?;
                let nt = max_abs(&rt);
                if nt.is_finite() && sum_sq(&rt) < merit {
                    accepted = Some((trial, rt, nt));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((trial, rt, nt)) = accepted else {
            return Err(Error::NoConvergence {
                iterations: iteration,
                residual: norm,
            });
        };
        state = trial;
        r = rt;
        norm = nt;
    }
    Err(Error::NoConvergence {
        iterations: MAX_NEWTON_ITER,
        residual: norm,
    })
}

fn default_tau() -> f64 {
    0.1
}
fn default_one() -> f64 {
    1.0
}
fn default_qd() -> f64 {
    0.05
}

/// A single inverter attached to an infinite grid through susceptance `B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleInverterParams {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_one")]
    pub kappa: f64,
    pub chi: f64,
    #[serde(rename = "Pd")]
    pub pd: f64,
    #[serde(rename = "Qd", default = "default_qd")]
    pub qd: f64,
    #[serde(rename = "Ed", default = "default_one")]
    pub ed: f64,
    #[serde(default)]
    pub omega_d: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "E_hat", default = "default_one")]
    pub e_hat: f64,
}

impl SingleInverterParams {
    pub fn validate(&self) -> Result<()> {
        for (what, x) in [
            ("tau", self.tau),
            ("kappa", self.kappa),
            ("chi", self.chi),
            ("Ed", self.ed),
            ("B", self.b),
            ("E_hat", self.e_hat),
        ] {
            if !(x > 0.0) || !x.is_finite() {
                return Err(Error::InvalidParams(format!("{what} = {x} must be positive")));
            }
        }
        for (what, x) in [("Pd", self.pd), ("Qd", self.qd), ("omega_d", self.omega_d)] {
            if !x.is_finite() {
                return Err(Error::InvalidParams(format!("{what} must be finite")));
            }
        }
        Ok(())
    }

    /// Two-node network: inverter at node 0, infinite grid at node 1.
    pub fn network(&self) -> Result<GridNetwork> {
        GridNetwork::build(
            2,
            &[Line {
                from: 0,
                to: 1,
                b: self.b,
                g: 0.0,
            }],
            &[],
            true,
        )
    }

    /// Parameters of the two-node model; the grid node (slack 1) is held at
    /// voltage `E_hat`.
    pub fn inverter_params(&self) -> InverterParams {
        InverterParams {
            tau: vec![self.tau; 2],
            kappa: vec![self.kappa; 2],
            chi: vec![self.chi; 2],
            pd: vec![self.pd, 0.0],
            qd: vec![self.qd, 0.0],
            ed: vec![self.ed, self.e_hat],
            omega_d: self.omega_d,
        }
    }

    pub const SLACK: usize = 1;

    /// Coefficients `[c0, c1, c2, c3, c4]` of the quartic in the inverter
    /// voltage obtained by squaring and adding the stationarity conditions
    ///
    /// ```text
    /// B E_hat E sin(d) = p,              p = Pd + omega_d / kappa
    /// B E_hat E cos(d) = B E^2 + E/chi - a,   a = Ed/chi + Qd
    /// ```
    pub fn quartic_coefficients(&self) -> [f64; 5] {
        let (b, chi) = (self.b, self.chi);
        let a = self.ed / chi + self.qd;
        let p = self.active_target();
        [
            a * a + p * p,
            -2.0 * a / chi,
            1.0 / (chi * chi) - 2.0 * a * b - self.e_hat * self.e_hat * b * b,
            2.0 * b / chi,
            b * b,
        ]
    }

    /// `Pd + omega_d / kappa`, the active power delivered at equilibrium.
    pub fn active_target(&self) -> f64 {
        self.pd + self.omega_d / self.kappa
    }
}

/// All admissible equilibria of a single inverter against an infinite grid,
/// sorted by decreasing inverter voltage.
///
/// Candidates come from the positive real roots of the quartic; both arcsine
/// branches are back-substituted and only points passing the residual check
/// are kept. An empty list means no fixed point exists.
pub fn single_inverter_equilibria(p: &SingleInverterParams) -> Result<Vec<Equilibrium>> {
    p.validate()?;
    let net = p.network()?;
    let params = p.inverter_params();
    let slack = Some(SingleInverterParams::SLACK);
    let roots = polynomial_roots(&p.quartic_coefficients())?;
    let target = p.active_target();

    let mut found: Vec<Equilibrium> = Vec::new();
    for z in roots {
        if z.im.abs() >= REAL_ROOT_TOL * (1.0 + z.re.abs()) || z.re <= 0.0 {
            continue;
        }
        let e = z.re;
        let arg = target / (p.b * p.e_hat * e);
        if arg.abs() > 1.0 + 1e-9 {
            continue;
        }
        let principal = arg.clamp(-1.0, 1.0).asin();
        let mut complementary = PI - principal;
        if complementary > PI {
            complementary -= 2.0 * PI;
        }
        for delta in [principal, complementary] {
            let candidate = SystemState {
                delta: vec![delta, 0.0],
                omega: vec![0.0; 2],
                e: vec![e, p.e_hat],
            };
            if residual_norm(&candidate, &params, &net, slack)? > 1e-6 {
                continue;
            }
            // polish against the unsquared equations
            let polished = match solve_newton(&net, &params, slack, Some(&candidate)) {
                Ok(eq) => eq,
                Err(_) => continue,
            };
            if polished.residual_norm >= ACCEPT_TOL || polished.state.e[0] <= 0.0 {
                continue;
            }
            let duplicate = found.iter().any(|q| {
                (q.state.e[0] - polished.state.e[0]).abs() < 1e-9
                    && angle_distance(q.state.delta[0], polished.state.delta[0]) < 1e-9
            });
            if !duplicate {
                found.push(Equilibrium {
                    method: Method::AnalyticQuartic,
                    iterations: 0,
                    ..polished
                });
            }
        }
    }
    found.sort_by(|a, b| b.state.e[0].total_cmp(&a.state.e[0]));
    Ok(found)
}

fn angle_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}
