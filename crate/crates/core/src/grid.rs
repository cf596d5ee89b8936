//! Electrical network model: nodal susceptance/conductance matrices,
//! Kron reduction of passive nodes and instantaneous power injections.
//!
//! Sign convention: an inductive line of susceptance `b > 0` between nodes
//! `j` and `l` contributes `B[j,l] = B[l,j] = b` and `-b` to both diagonal
//! entries, so that without shunts every row of `B` sums to zero. Shunt
//! susceptances are added to the diagonal. Line conductances enter `G` with
//! the opposite sign (`G[j,l] = -g`, `G[j,j] = g_shunt + sum g`).

use std::collections::VecDeque;

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SystemState;

const SYMMETRY_TOL: f64 = 1e-12;

/// A transmission line in a network description file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    /// Line susceptance magnitude (pu), strictly positive.
    pub b: f64,
    /// Line conductance (pu). Must be zero for lossless networks.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub g: f64,
}

/// A shunt element to ground.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shunt {
    pub node: usize,
    pub b: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub g: f64,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

fn default_true() -> bool {
    true
}

/// On-disk network description (`nodes`, `lines`, `shunts`, `lossless`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    pub nodes: usize,
    #[serde(default)]
    pub lines: Vec<Line>,
    #[serde(default)]
    pub shunts: Vec<Shunt>,
    #[serde(default = "default_true")]
    pub lossless: bool,
}

impl NetworkFile {
    pub fn build(&self) -> Result<GridNetwork> {
        GridNetwork::build(self.nodes, &self.lines, &self.shunts, self.lossless)
    }
}

/// Nodal admittance data of a (Kron-reduced) grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridNetwork {
    b: DMatrix<f64>,
    g: DMatrix<f64>,
    lossless: bool,
}

impl GridNetwork {
    /// Assembles the nodal matrices from a line and shunt list.
    ///
    /// Parallel lines between the same pair of nodes are summed. The graph
    /// formed by the lines must be connected.
    pub fn build(nodes: usize, lines: &[Line], shunts: &[Shunt], lossless: bool) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::InvalidNetwork("network has no nodes".into()));
        }
        let mut b = DMatrix::zeros(nodes, nodes);
        let mut g = DMatrix::zeros(nodes, nodes);
        for line in lines {
            let (j, l) = (line.from, line.to);
            if j >= nodes || l >= nodes {
                return Err(Error::InvalidNetwork(format!(
                    "line {j}-{l} references a node outside 0..{nodes}"
                )));
            }
            if j == l {
                return Err(Error::InvalidNetwork(format!("self-loop at node {j}")));
            }
            if !(line.b > 0.0) || !line.b.is_finite() {
                return Err(Error::InvalidNetwork(format!(
                    "line {j}-{l} has non-positive susceptance {}",
                    line.b
                )));
            }
            if !line.g.is_finite() || line.g < 0.0 {
                return Err(Error::InvalidNetwork(format!(
                    "line {j}-{l} has invalid conductance {}",
                    line.g
                )));
            }
            if lossless && line.g != 0.0 {
                return Err(Error::InvalidNetwork(format!(
                    "line {j}-{l} has conductance {} in a lossless network",
                    line.g
                )));
            }
            b[(j, l)] += line.b;
            b[(l, j)] += line.b;
            b[(j, j)] -= line.b;
            b[(l, l)] -= line.b;
            g[(j, l)] -= line.g;
            g[(l, j)] -= line.g;
            g[(j, j)] += line.g;
            g[(l, l)] += line.g;
        }
        for shunt in shunts {
            if shunt.node >= nodes {
                return Err(Error::InvalidNetwork(format!(
                    "shunt references node {} outside 0..{nodes}",
                    shunt.node
                )));
            }
            if !shunt.b.is_finite() || !shunt.g.is_finite() {
                return Err(Error::InvalidNetwork("non-finite shunt".into()));
            }
            if lossless && shunt.g != 0.0 {
                return Err(Error::InvalidNetwork(format!(
                    "shunt at node {} has conductance in a lossless network",
                    shunt.node
                )));
            }
            b[(shunt.node, shunt.node)] += shunt.b;
            g[(shunt.node, shunt.node)] += shunt.g;
        }
        Self::from_matrices(b, g, lossless)
    }

    /// Wraps existing nodal matrices after checking the structural invariants.
    pub fn from_matrices(b: DMatrix<f64>, g: DMatrix<f64>, lossless: bool) -> Result<Self> {
        let n = b.nrows();
        if b.ncols() != n {
            return Err(Error::Dimension {
                what: "susceptance matrix columns",
                expected: n,
                got: b.ncols(),
            });
        }
        if g.shape() != (n, n) {
            return Err(Error::Dimension {
                what: "conductance matrix",
                expected: n,
                got: g.nrows(),
            });
        }
        for j in 0..n {
            for l in (j + 1)..n {
                if (b[(j, l)] - b[(l, j)]).abs() > SYMMETRY_TOL || (g[(j, l)] - g[(l, j)]).abs() > SYMMETRY_TOL {
                    return Err(Error::InvalidNetwork(format!(
                        "admittance matrix not symmetric at ({j},{l})"
                    )));
                }
                if b[(j, l)] < -SYMMETRY_TOL {
                    return Err(Error::InvalidNetwork(format!(
                        "negative coupling B[{j},{l}] = {}",
                        b[(j, l)]
                    )));
                }
            }
        }
        if lossless && g.iter().any(|&x| x != 0.0) {
            return Err(Error::InvalidNetwork(
                "lossless network with non-zero conductance".into(),
            ));
        }
        let net = GridNetwork { b, g, lossless };
        if !net.is_connected() {
            return Err(Error::InvalidNetwork("network is not connected".into()));
        }
        Ok(net)
    }

    pub fn len(&self) -> usize {
        self.b.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn susceptance(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn conductance(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn is_lossless(&self) -> bool {
        self.lossless
    }

    /// Pairs `(j, l)` with `j < l` that are coupled through a line.
    pub fn couplings(&self) -> Vec<(usize, usize)> {
        let n = self.len();
        let mut out = Vec::new();
        for j in 0..n {
            for l in (j + 1)..n {
                if self.b[(j, l)] != 0.0 || self.g[(j, l)] != 0.0 {
                    out.push((j, l));
                }
            }
        }
        out
    }

    fn is_connected(&self) -> bool {
        let n = self.len();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(j) = queue.pop_front() {
            for (l, s) in seen.iter_mut().enumerate() {
                if !*s && l != j && (self.b[(j, l)] != 0.0 || self.g[(j, l)] != 0.0) {
                    *s = true;
                    queue.push_back(l);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Returns a copy with every line and shunt admittance scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(Error::InvalidNetwork(format!(
                "admittance scale factor must be positive, got {factor}"
            )));
        }
        Ok(GridNetwork {
            b: &self.b * factor,
            g: &self.g * factor,
            lossless: self.lossless,
        })
    }

    /// Eliminates the `passive` nodes (constant impedance loads) through the
    /// Schur complement of the admittance matrix. Active nodes keep their
    /// relative order.
    pub fn kron_reduce(&self, passive: &[usize]) -> Result<Self> {
        let n = self.len();
        let mut is_passive = vec![false; n];
        for &p in passive {
            if p >= n {
                return Err(Error::InvalidNetwork(format!("passive node {p} outside 0..{n}")));
            }
            is_passive[p] = true;
        }
        if passive.is_empty() {
            return Ok(self.clone());
        }
        let active: Vec<usize> = (0..n).filter(|&j| !is_passive[j]).collect();
        let passive: Vec<usize> = (0..n).filter(|&j| is_passive[j]).collect();
        if active.is_empty() {
            return Err(Error::InvalidNetwork("no active nodes left".into()));
        }

        let (b, g) = if self.lossless {
            let b = schur_complement_real(&self.b, &active, &passive)?;
            let g = DMatrix::zeros(active.len(), active.len());
            (b, g)
        } else {
            let y = DMatrix::from_fn(n, n, |r, c| Complex::new(self.g[(r, c)], self.b[(r, c)]));
            let red = schur_complement_complex(&y, &active, &passive)?;
            (red.map(|z| z.im), red.map(|z| z.re))
        };
        let b = symmetrize(b);
        let g = symmetrize(g);
        Self::from_matrices(b, g, self.lossless)
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

fn select_c(m: &DMatrix<Complex<f64>>, rows: &[usize], cols: &[usize]) -> DMatrix<Complex<f64>> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

fn schur_complement_real(m: &DMatrix<f64>, active: &[usize], passive: &[usize]) -> Result<DMatrix<f64>> {
    let aa = select(m, active, active);
    let ap = select(m, active, passive);
    let pa = select(m, passive, active);
    let pp = select(m, passive, passive);
    let scale = pp.amax().max(f64::MIN_POSITIVE);
    let lu = pp.lu();
    let min_pivot = lu.u().diagonal().iter().fold(f64::INFINITY, |acc, x| acc.min(x.abs()));
    if min_pivot <= 1e-12 * scale {
        return Err(Error::SingularPassiveBlock(format!(
            "smallest pivot {min_pivot:.3e} relative to block scale {scale:.3e}; \
             a passive node without shunt path to ground or a cancelling shunt makes the block singular"
        )));
    }
    let x = lu
        .solve(&pa)
        .ok_or_else(|| Error::SingularPassiveBlock("LU solve failed".into()))?;
    Ok(aa - ap * x)
}

fn schur_complement_complex(
    m: &DMatrix<Complex<f64>>,
    active: &[usize],
    passive: &[usize],
) -> Result<DMatrix<Complex<f64>>> {
    let aa = select_c(m, active, active);
    let ap = select_c(m, active, passive);
    let pa = select_c(m, passive, active);
    let pp = select_c(m, passive, passive);
    let scale = pp
        .iter()
        .fold(0.0f64, |acc, z| acc.max(z.norm()))
        .max(f64::MIN_POSITIVE);
    let lu = pp.lu();
    let min_pivot = lu.u().diagonal().iter().fold(f64::INFINITY, |acc, z| acc.min(z.norm()));
    if min_pivot <= 1e-12 * scale {
        return Err(Error::SingularPassiveBlock(format!(
            "smallest pivot {min_pivot:.3e} relative to block scale {scale:.3e}"
        )));
    }
    let x = lu
        .solve(&pa)
        .ok_or_else(|| Error::SingularPassiveBlock("LU solve failed".into()))?;
    Ok(aa - ap * x)
}

/// Active and reactive power injected into the grid at every node.
///
/// `P[j] = sum_l E_j E_l (B[j,l] sin(d_j - d_l) + G[j,l] cos(d_j - d_l))`,
/// `Q[j] = sum_l E_j E_l (-B[j,l] cos(d_j - d_l) + G[j,l] sin(d_j - d_l))`.
pub fn power_injections(state: &SystemState, net: &GridNetwork) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = net.len();
    state.check_len(n)?;
    let (delta, e) = (&state.delta, &state.e);
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for j in 0..n {
        let (mut pj, mut qj) = (0.0, 0.0);
        for l in 0..n {
            let bjl = net.b[(j, l)];
            let gjl = net.g[(j, l)];
            if bjl == 0.0 && gjl == 0.0 {
                continue;
            }
            let (s, c) = (delta[j] - delta[l]).sin_cos();
            let ee = e[j] * e[l];
            pj += ee * (bjl * s + gjl * c);
            qj += ee * (-bjl * c + gjl * s);
        }
        p[j] = pj;
        q[j] = qj;
    }
    Ok((p, q))
}

/// Partial derivatives of the injections with respect to angles and voltages.
#[derive(Debug, Clone)]
pub struct InjectionJacobian {
    pub dp_ddelta: DMatrix<f64>,
    pub dp_de: DMatrix<f64>,
    pub dq_ddelta: DMatrix<f64>,
    pub dq_de: DMatrix<f64>,
}

/// Analytic derivatives of [`power_injections`].
pub fn injection_jacobian(state: &SystemState, net: &GridNetwork) -> Result<InjectionJacobian> {
    let n = net.len();
    state.check_len(n)?;
    let (p, q) = power_injections(state, net)?;
    let (delta, e) = (&state.delta, &state.e);
    let mut jac = InjectionJacobian {
        dp_ddelta: DMatrix::zeros(n, n),
        dp_de: DMatrix::zeros(n, n),
        dq_ddelta: DMatrix::zeros(n, n),
        dq_de: DMatrix::zeros(n, n),
    };
    for j in 0..n {
        for l in 0..n {
            if l == j {
                continue;
            }
            let bjl = net.b[(j, l)];
            let gjl = net.g[(j, l)];
            if bjl == 0.0 && gjl == 0.0 {
                continue;
            }
            let (s, c) = (delta[j] - delta[l]).sin_cos();
            let ee = e[j] * e[l];
            jac.dp_ddelta[(j, l)] = ee * (-bjl * c + gjl * s);
            jac.dp_ddelta[(j, j)] += ee * (bjl * c - gjl * s);
            jac.dq_ddelta[(j, l)] = ee * (-bjl * s - gjl * c);
            jac.dq_ddelta[(j, j)] += ee * (bjl * s + gjl * c);
            jac.dp_de[(j, l)] = e[j] * (bjl * s + gjl * c);
            jac.dq_de[(j, l)] = e[j] * (-bjl * c + gjl * s);
        }
        jac.dp_de[(j, j)] = p[j] / e[j] + e[j] * net.g[(j, j)];
        jac.dq_de[(j, j)] = q[j] / e[j] - e[j] * net.b[(j, j)];
    }
    Ok(jac)
}
