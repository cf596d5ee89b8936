//! Inverter parameters, system state and the droop-control equations of motion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{power_injections, GridNetwork};

/// Phase angles, frequency deviations and voltage magnitudes per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub delta: Vec<f64>,
    pub omega: Vec<f64>,
    #[serde(rename = "E")]
    pub e: Vec<f64>,
}

impl SystemState {
    /// All angles and frequencies zero, all voltages one.
    pub fn flat(n: usize) -> Self {
        SystemState {
            delta: vec![0.0; n],
            omega: vec![0.0; n],
            e: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    pub(crate) fn check_len(&self, n: usize) -> Result<()> {
        for (what, v) in [("delta", &self.delta), ("omega", &self.omega), ("E", &self.e)] {
            if v.len() != n {
                return Err(Error::Dimension {
                    what,
                    expected: n,
                    got: v.len(),
                });
            }
        }
        Ok(())
    }

    /// Stacks the state as `[delta, omega, E]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * self.len());
        v.extend_from_slice(&self.delta);
        v.extend_from_slice(&self.omega);
        v.extend_from_slice(&self.e);
        v
    }

    pub fn from_slice(y: &[f64]) -> Self {
        let n = y.len() / 3;
        SystemState {
            delta: y[..n].to_vec(),
            omega: y[n..2 * n].to_vec(),
            e: y[2 * n..3 * n].to_vec(),
        }
    }

    /// Adds `c` to every phase angle.
    pub fn shifted(&self, c: f64) -> Self {
        let mut s = self.clone();
        s.delta.iter_mut().for_each(|d| *d += c);
        s
    }
}

/// Per-node droop parameters plus the global desired frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverterParams {
    pub tau: Vec<f64>,
    pub kappa: Vec<f64>,
    pub chi: Vec<f64>,
    #[serde(rename = "Pd")]
    pub pd: Vec<f64>,
    #[serde(rename = "Qd")]
    pub qd: Vec<f64>,
    #[serde(rename = "Ed")]
    pub ed: Vec<f64>,
    #[serde(default)]
    pub omega_d: f64,
}

impl InverterParams {
    /// Identical inverters with zero power setpoints.
    pub fn uniform(n: usize, tau: f64, kappa: f64, chi: f64) -> Self {
        InverterParams {
            tau: vec![tau; n],
            kappa: vec![kappa; n],
            chi: vec![chi; n],
            pd: vec![0.0; n],
            qd: vec![0.0; n],
            ed: vec![1.0; n],
            omega_d: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    /// Checks lengths against `n` and strict positivity of time constants,
    /// droop gains and desired voltages.
    pub fn validate(&self, n: usize) -> Result<()> {
        let fields: [(&'static str, &Vec<f64>, bool); 6] = [
            ("tau", &self.tau, true),
            ("kappa", &self.kappa, true),
            ("chi", &self.chi, true),
            ("Pd", &self.pd, false),
            ("Qd", &self.qd, false),
            ("Ed", &self.ed, true),
        ];
        for (what, v, positive) in fields {
            if v.len() != n {
                return Err(Error::Dimension {
                    what,
                    expected: n,
                    got: v.len(),
                });
            }
            for (j, &x) in v.iter().enumerate() {
                if !x.is_finite() || (positive && x <= 0.0) {
                    return Err(Error::InvalidParams(format!(
                        "{what}[{j}] = {x} must be finite{}",
                        if positive { " and strictly positive" } else { "" }
                    )));
                }
            }
        }
        if !self.omega_d.is_finite() {
            return Err(Error::InvalidParams("omega_d must be finite".into()));
        }
        Ok(())
    }
}

/// A scalar applied to every node or an explicit per-node list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerNode {
    Uniform(f64),
    Each(Vec<f64>),
}

impl PerNode {
    fn expand(&self, n: usize, what: &'static str) -> Result<Vec<f64>> {
        match self {
            PerNode::Uniform(x) => Ok(vec![*x; n]),
            PerNode::Each(v) if v.len() == n => Ok(v.clone()),
            PerNode::Each(v) => Err(Error::Dimension {
                what,
                expected: n,
                got: v.len(),
            }),
        }
    }
}

/// Parameter block as written in configuration files; scalars broadcast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    #[serde(default = "default_tau")]
    pub tau: PerNode,
    #[serde(default = "default_one")]
    pub kappa: PerNode,
    pub chi: PerNode,
    #[serde(rename = "Pd", default = "default_zero")]
    pub pd: PerNode,
    #[serde(rename = "Qd", default = "default_qd")]
    pub qd: PerNode,
    #[serde(rename = "Ed", default = "default_one")]
    pub ed: PerNode,
    #[serde(default)]
    pub omega_d: f64,
}

fn default_tau() -> PerNode {
    PerNode::Uniform(0.1)
}
fn default_one() -> PerNode {
    PerNode::Uniform(1.0)
}
fn default_zero() -> PerNode {
    PerNode::Uniform(0.0)
}
fn default_qd() -> PerNode {
    PerNode::Uniform(0.05)
}

impl ParamsFile {
    pub fn expand(&self, n: usize) -> Result<InverterParams> {
        let p = InverterParams {
            tau: self.tau.expand(n, "tau")?,
            kappa: self.kappa.expand(n, "kappa")?,
            chi: self.chi.expand(n, "chi")?,
            pd: self.pd.expand(n, "Pd")?,
            qd: self.qd.expand(n, "Qd")?,
            ed: self.ed.expand(n, "Ed")?,
            omega_d: self.omega_d,
        };
        p.validate(n)?;
        Ok(p)
    }
}

/// Right-hand side of the droop equations of motion
///
/// ```text
/// d/dt delta_j = omega_j
/// tau_j d/dt omega_j = -omega_j + omega_d - kappa_j (P_j - Pd_j)
/// tau_j d/dt E_j     = -E_j + Ed_j - chi_j (Q_j - Qd_j)
/// ```
///
/// The slack node, if any, is an ideal source and has zero derivative.
pub fn vector_field(
    state: &SystemState,
    params: &InverterParams,
    net: &GridNetwork,
    slack: Option<usize>,
) -> Result<SystemState> {
    let n = net.len();
    let (p, q) = power_injections(state, net)?;
    let mut d = SystemState {
        delta: vec![0.0; n],
        omega: vec![0.0; n],
        e: vec![0.0; n],
    };
    for j in 0..n {
        if Some(j) == slack {
            continue;
        }
        d.delta[j] = state.omega[j];
        d.omega[j] = (-state.omega[j] + params.omega_d - params.kappa[j] * (p[j] - params.pd[j])) / params.tau[j];
        d.e[j] = (-state.e[j] + params.ed[j] - params.chi[j] * (q[j] - params.qd[j])) / params.tau[j];
    }
    Ok(d)
}
