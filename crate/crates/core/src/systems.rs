//! Named test systems and user networks, addressable by parameter paths.
//!
//! Paths for the built-in systems are field names, optionally prefixed with
//! `system.` (e.g. `chi`, `system.B`). User networks accept
//! `inverter.<j>.<field>` or `inverter.*.<field>` for per-node parameters,
//! `global.omega_d` and `global.B_scale`.

use serde::{Deserialize, Serialize};

use crate::equilibrium::{single_inverter_equilibria, solve_newton, Equilibrium, SingleInverterParams};
use crate::error::{Error, Result};
use crate::grid::{GridNetwork, Line, NetworkFile};
use crate::model::{InverterParams, ParamsFile, PerNode, SystemState};

fn default_tau() -> f64 {
    0.1
}
fn default_one() -> f64 {
    1.0
}
fn default_qd() -> f64 {
    0.05
}

/// Uniform parameters of the two-inverter and tree test systems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformParams {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_one")]
    pub kappa: f64,
    pub chi: f64,
    /// Line susceptance of every line.
    #[serde(rename = "B")]
    pub b: f64,
    /// Producer setpoint.
    #[serde(rename = "P", alias = "Pd", default)]
    pub p: f64,
    #[serde(rename = "Qd", default = "default_qd")]
    pub qd: f64,
    #[serde(rename = "Ed", default = "default_one")]
    pub ed: f64,
    #[serde(default)]
    pub omega_d: f64,
}

impl UniformParams {
    fn set(&mut self, field: &str, value: f64) -> bool {
        let slot = match field {
            "tau" => &mut self.tau,
            "kappa" => &mut self.kappa,
            "chi" => &mut self.chi,
            "B" => &mut self.b,
            "P" | "Pd" | "Pdf" => &mut self.p,
            "Qd" => &mut self.qd,
            "Ed" => &mut self.ed,
            "omega_d" => &mut self.omega_d,
            _ => return false,
        };
        *slot = value;
        true
    }

    fn get(&self, field: &str) -> Option<f64> {
        Some(match field {
            "tau" => self.tau,
            "kappa" => self.kappa,
            "chi" => self.chi,
            "B" => self.b,
            "P" | "Pd" | "Pdf" => self.p,
            "Qd" => self.qd,
            "Ed" => self.ed,
            "omega_d" => self.omega_d,
            _ => return None,
        })
    }

    fn inverter_params(&self, pd: Vec<f64>) -> InverterParams {
        let n = pd.len();
        InverterParams {
            tau: vec![self.tau; n],
            kappa: vec![self.kappa; n],
            chi: vec![self.chi; n],
            pd,
            qd: vec![self.qd; n],
            ed: vec![self.ed; n],
            omega_d: self.omega_d,
        }
    }
}

/// A user network with per-node parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSystem {
    pub network: NetworkFile,
    /// Nodes eliminated by Kron reduction before analysis; the remaining
    /// nodes are renumbered in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub passive: Vec<usize>,
    pub params: ParamsFile,
    #[serde(default)]
    pub slack: Option<usize>,
    #[serde(rename = "B_scale", default = "default_one")]
    pub b_scale: f64,
}

impl NetworkSystem {
    fn active_nodes(&self) -> usize {
        self.network.nodes.saturating_sub(self.passive.len())
    }

    fn per_node(&mut self, field: &str) -> Option<&mut PerNode> {
        Some(match field {
            "tau" => &mut self.params.tau,
            "kappa" => &mut self.params.kappa,
            "chi" => &mut self.params.chi,
            "Pd" => &mut self.params.pd,
            "Qd" => &mut self.params.qd,
            "Ed" => &mut self.params.ed,
            _ => return None,
        })
    }
}

/// Which system to build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "snake_case")]
pub enum SystemDef {
    /// One inverter against an infinite grid.
    SingleInverter(SingleInverterParams),
    /// Producer (node 0, `P`) and consumer (node 1, `-P`); node 1 is the slack.
    TwoInverter(UniformParams),
    /// Ten nodes: slack at the centre (0), three inner consumers (1-3) with
    /// two producer leaves each (4-9). Producers draw `P`, consumers `-3P/2`.
    Tree(UniformParams),
    Network(NetworkSystem),
}

/// A concrete system ready for analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct System {
    pub net: GridNetwork,
    pub params: InverterParams,
    pub slack: Option<usize>,
    /// Present for the single-inverter system, which has a closed-form
    /// equilibrium polynomial.
    pub single: Option<SingleInverterParams>,
}

/// Edges of the ten-node tree.
pub const TREE_LINES: [(usize, usize); 9] = [(0, 1), (0, 2), (0, 3), (1, 4), (1, 5), (2, 6), (2, 7), (3, 8), (3, 9)];

impl SystemDef {
    pub fn realize(&self) -> Result<System> {
        match self {
            SystemDef::SingleInverter(p) => {
                p.validate()?;
                Ok(System {
                    net: p.network()?,
                    params: p.inverter_params(),
                    slack: Some(SingleInverterParams::SLACK),
                    single: Some(p.clone()),
                })
            }
            SystemDef::TwoInverter(u) => {
                let net = GridNetwork::build(
                    2,
                    &[Line {
                        from: 0,
                        to: 1,
                        b: u.b,
                        g: 0.0,
                    }],
                    &[],
                    true,
                )?;
                let params = u.inverter_params(vec![u.p, -u.p]);
                params.validate(2)?;
                Ok(System {
                    net,
                    params,
                    slack: Some(1),
                    single: None,
                })
            }
            SystemDef::Tree(u) => {
                let lines: Vec<Line> = TREE_LINES
                    .iter()
                    .map(|&(from, to)| Line {
                        from,
                        to,
                        b: u.b,
                        g: 0.0,
                    })
                    .collect();
                let net = GridNetwork::build(10, &lines, &[], true)?;
                let pd = (0..10).map(|j| if j <= 3 { -1.5 * u.p } else { u.p }).collect();
                let params = u.inverter_params(pd);
                params.validate(10)?;
                Ok(System {
                    net,
                    params,
                    slack: Some(0),
                    single: None,
                })
            }
            SystemDef::Network(ns) => {
                let mut net = ns.network.build()?;
                if !ns.passive.is_empty() {
                    net = net.kron_reduce(&ns.passive)?;
                }
                let net = net.scaled(ns.b_scale)?;
                let params = ns.params.expand(net.len())?;
                if let Some(s) = ns.slack {
                    if s >= net.len() {
                        return Err(Error::InvalidConfig(format!("slack node {s} outside 0..{}", net.len())));
                    }
                }
                Ok(System {
                    net,
                    params,
                    slack: ns.slack,
                    single: None,
                })
            }
        }
    }

    /// Sets a scalar parameter by path.
    pub fn set(&mut self, path: &str, value: f64) -> Result<()> {
        let bad = || Error::InvalidPath(path.to_string());
        match self {
            SystemDef::SingleInverter(p) => {
                let field = path.strip_prefix("system.").unwrap_or(path);
                let slot = match field {
                    "tau" => &mut p.tau,
                    "kappa" => &mut p.kappa,
                    "chi" => &mut p.chi,
                    "Pd" => &mut p.pd,
                    "Qd" => &mut p.qd,
                    "Ed" => &mut p.ed,
                    "omega_d" => &mut p.omega_d,
                    "B" => &mut p.b,
                    "E_hat" => &mut p.e_hat,
                    _ => return Err(bad()),
                };
                *slot = value;
                Ok(())
            }
            SystemDef::TwoInverter(u) | SystemDef::Tree(u) => {
                let field = path.strip_prefix("system.").unwrap_or(path);
                if u.set(field, value) {
                    Ok(())
                } else {
                    Err(bad())
                }
            }
            SystemDef::Network(ns) => {
                let parts: Vec<&str> = path.split('.').collect();
                match parts.as_slice() {
                    ["global", "omega_d"] => ns.params.omega_d = value,
                    ["global", "B_scale"] => ns.b_scale = value,
                    ["inverter", who, field] => {
                        let n = ns.active_nodes();
                        let target = if *who == "*" {
                            None
                        } else {
                            let j: usize = who.parse().map_err(|_| bad())?;
                            if j >= n {
                                return Err(bad());
                            }
                            Some(j)
                        };
                        let slot = ns.per_node(field).ok_or_else(bad)?;
                        match target {
                            None => *slot = PerNode::Uniform(value),
                            Some(j) => {
                                let mut v = match slot {
                                    PerNode::Uniform(x) => vec![*x; n],
                                    PerNode::Each(v) => v.clone(),
                                };
                                if v.len() != n {
                                    return Err(Error::Dimension {
                                        what: "per-node parameter",
                                        expected: n,
                                        got: v.len(),
                                    });
                                }
                                v[j] = value;
                                *slot = PerNode::Each(v);
                            }
                        }
                    }
                    _ => return Err(bad()),
                }
                Ok(())
            }
        }
    }

    /// Reads a scalar parameter by path (for per-node paths, the value at
    /// that node; `*` requires a uniform value).
    pub fn get(&self, path: &str) -> Result<f64> {
        let bad = || Error::InvalidPath(path.to_string());
        match self {
            SystemDef::SingleInverter(p) => {
                let field = path.strip_prefix("system.").unwrap_or(path);
                Ok(match field {
                    "tau" => p.tau,
                    "kappa" => p.kappa,
                    "chi" => p.chi,
                    "Pd" => p.pd,
                    "Qd" => p.qd,
                    "Ed" => p.ed,
                    "omega_d" => p.omega_d,
                    "B" => p.b,
                    "E_hat" => p.e_hat,
                    _ => return Err(bad()),
                })
            }
            SystemDef::TwoInverter(u) | SystemDef::Tree(u) => {
                u.get(path.strip_prefix("system.").unwrap_or(path)).ok_or_else(bad)
            }
            SystemDef::Network(ns) => {
                let parts: Vec<&str> = path.split('.').collect();
                match parts.as_slice() {
                    ["global", "omega_d"] => Ok(ns.params.omega_d),
                    ["global", "B_scale"] => Ok(ns.b_scale),
                    ["inverter", who, field] => {
                        let mut copy = ns.clone();
                        let slot = copy.per_node(field).ok_or_else(bad)?;
                        match (slot, *who) {
                            (PerNode::Uniform(x), _) => Ok(*x),
                            (PerNode::Each(v), "*") => {
                                if v.iter().all(|x| *x == v[0]) && !v.is_empty() {
                                    Ok(v[0])
                                } else {
                                    Err(bad())
                                }
                            }
                            (PerNode::Each(v), j) => {
                                let j: usize = j.parse().map_err(|_| bad())?;
                                v.get(j).copied().ok_or_else(bad)
                            }
                        }
                    }
                    _ => Err(bad()),
                }
            }
        }
    }
}

/// Load-scaling steps used when the flat start fails.
const HOMOTOPY_STEPS: usize = 8;

impl System {
    pub fn len(&self) -> usize {
        self.net.len()
    }

    pub fn is_empty(&self) -> bool {
        self.net.is_empty()
    }

    /// Equilibria of the system. The single inverter returns every admissible
    /// root of its polynomial; other systems return the operating point
    /// reached by Newton's method from a flat start, falling back to a ramp
    /// of the active-power setpoints. An empty list means none was found.
    /// Solver breakdowns count as "none found"; only invalid input is an
    /// error.
    pub fn equilibria(&self) -> Result<Vec<Equilibrium>> {
        if let Some(p) = &self.single {
            return single_inverter_equilibria(p);
        }
        match solve_newton(&self.net, &self.params, self.slack, None) {
            Ok(eq) => return Ok(vec![eq]),
            Err(Error::NoConvergence { .. } | Error::SingularJacobian { .. } | Error::Consistency(_)) => {}
            Err(e) => return Err(e),
        }
        let mut last: Option<Equilibrium> = None;
        for step in 1..=HOMOTOPY_STEPS {
            let s = step as f64 / HOMOTOPY_STEPS as f64;
            let mut partial = self.params.clone();
            partial.pd.iter_mut().for_each(|p| *p *= s);
            partial.omega_d *= s;
            let init: Option<&SystemState> = last.as_ref().map(|eq| &eq.state);
            match solve_newton(&self.net, &partial, self.slack, init) {
                Ok(eq) => last = Some(eq),
                Err(Error::NoConvergence { .. } | Error::SingularJacobian { .. } | Error::Consistency(_)) => {
                    return Ok(Vec::new())
                }
                Err(e) => return Err(e),
            }
        }
        // the final ramp step carries the full setpoints
        Ok(last.into_iter().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(b: f64, p: f64, chi: f64) -> SystemDef {
        SystemDef::Tree(UniformParams {
            tau: 0.1,
            kappa: 1.0,
            chi,
            b,
            p,
            qd: 0.05,
            ed: 1.0,
            omega_d: 0.0,
        })
    }

    #[test]
    fn tree_layout() {
        let sys = tree(1.5, 0.2, 0.5).realize().unwrap();
        assert_eq!(sys.len(), 10);
        assert_eq!(sys.slack, Some(0));
        assert_eq!(sys.net.couplings().len(), 9);
        let producers = sys.params.pd.iter().filter(|&&p| p > 0.0).count();
        assert_eq!(producers, 6);
        assert!((sys.params.pd[2] + 0.3).abs() < 1e-15);
    }

    #[test]
    fn tree_equilibrium_is_accurate() {
        let sys = tree(1.5, 0.2, 0.5).realize().unwrap();
        let eqs = sys.equilibria().unwrap();
        assert_eq!(eqs.len(), 1);
        assert!(eqs[0].residual_norm < 1e-10);
    }

    #[test]
    fn paths_for_builtins() {
        let mut def = tree(1.5, 0.2, 0.5);
        def.set("system.B", 2.0).unwrap();
        def.set("P", 0.4).unwrap();
        assert_eq!(def.get("B").unwrap(), 2.0);
        assert_eq!(def.get("system.P").unwrap(), 0.4);
        assert!(matches!(def.set("inverter.0.chi", 1.0), Err(Error::InvalidPath(_))));
    }

    #[test]
    fn paths_for_networks() {
        let js = r#"{
            "system": "network",
            "network": {"nodes": 3, "lines": [{"from": 0, "to": 1, "b": 1.0}, {"from": 1, "to": 2, "b": 2.0}]},
            "params": {"chi": 0.1, "Pd": [0.2, 0.0, -0.2]},
            "slack": 1
        }"#;
        let mut def: SystemDef = serde_json::from_str(js).unwrap();
        def.set("inverter.2.chi", 0.3).unwrap();
        def.set("global.B_scale", 2.0).unwrap();
        assert_eq!(def.get("inverter.2.chi").unwrap(), 0.3);
        assert_eq!(def.get("inverter.0.chi").unwrap(), 0.1);
        assert!(def.get("inverter.*.chi").is_err());
        def.set("inverter.*.chi", 0.2).unwrap();
        assert_eq!(def.get("inverter.*.chi").unwrap(), 0.2);
        let sys = def.realize().unwrap();
        assert_eq!(sys.net.susceptance()[(1, 2)], 4.0);
        assert!(matches!(def.set("inverter.7.chi", 0.3), Err(Error::InvalidPath(_))));
        assert!(matches!(def.set("global.B", 0.3), Err(Error::InvalidPath(_))));
    }

    #[test]
    fn infeasible_load_reports_no_equilibrium() {
        let sys = tree(0.3, 2.0, 0.5).realize().unwrap();
        assert!(sys.equilibria().unwrap().is_empty());
    }
}
