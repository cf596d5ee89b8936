//! Two-parameter stability maps, separatrix extraction and containment
//! audits of sufficient criteria.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::criteria::{self, Analysis, CriterionVerdict, SubsetPolicy};
use crate::equilibrium::Equilibrium;
use crate::error::{Error, Result};
use crate::linearization::{build_linearization, eigen_stability, full_jacobian, StabilityReport};
use crate::parallel::{self, Execution};
use crate::systems::{System, SystemDef};

/// Absolute resolution of separatrix points along a grid edge.
pub const SEPARATRIX_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub path: String,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Axis {
    pub fn values(&self) -> Vec<f64> {
        let step = (self.max - self.min) / (self.count - 1) as f64;
        (0..self.count).map(|k| self.min + k as f64 * step).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.count < 2 || !(self.min < self.max) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "axis `{}` needs count >= 2 and min < max",
                self.path
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Evaluator {
    FixedPoint,
    Eigen,
    Cor1,
    Cor2,
    Cor3,
    Cor4,
    Cor5,
    Lemma2,
}

impl Evaluator {
    pub const ALL: [Evaluator; 8] = [
        Evaluator::FixedPoint,
        Evaluator::Eigen,
        Evaluator::Cor1,
        Evaluator::Cor2,
        Evaluator::Cor3,
        Evaluator::Cor4,
        Evaluator::Cor5,
        Evaluator::Lemma2,
    ];

    fn needs_criteria(self) -> bool {
        !matches!(self, Evaluator::FixedPoint | Evaluator::Eigen)
    }
}

fn all_evaluators() -> Vec<Evaluator> {
    Evaluator::ALL.to_vec()
}

/// A sweep request as read from a configuration file. The system keys sit
/// at the top level next to `x`, `y`, `fixed` and `evaluators`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    #[serde(flatten)]
    pub system: SystemDef,
    pub x: Axis,
    pub y: Axis,
    #[serde(default)]
    pub fixed: BTreeMap<String, f64>,
    #[serde(default = "all_evaluators")]
    pub evaluators: Vec<Evaluator>,
    #[serde(default)]
    pub subsets: SubsetPolicy,
}

impl SweepSpec {
    /// Checks the axes and that every path resolves on the system.
    pub fn validate(&self) -> Result<()> {
        self.x.validate()?;
        self.y.validate()?;
        let mut def = self.system.clone();
        for (path, v) in &self.fixed {
            def.set(path, *v)?;
        }
        def.set(&self.x.path, self.x.min)?;
        def.set(&self.y.path, self.y.min)?;
        Ok(())
    }

    fn base(&self) -> Result<SystemDef> {
        let mut def = self.system.clone();
        for (path, v) in &self.fixed {
            def.set(path, *v)?;
        }
        Ok(def)
    }

    fn at(&self, base: &SystemDef, x: f64, y: f64) -> Result<SystemDef> {
        let mut def = base.clone();
        def.set(&self.x.path, x)?;
        def.set(&self.y.path, y)?;
        Ok(def)
    }

    fn wants(&self, e: Evaluator) -> bool {
        self.evaluators.contains(&e)
    }
}

/// Criterion verdicts at the recorded equilibrium of a cell.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellCriteria {
    pub cor1: Option<CriterionVerdict>,
    pub cor2: Option<CriterionVerdict>,
    pub cor3: Option<CriterionVerdict>,
    pub cor4: Option<CriterionVerdict>,
    pub cor5: Option<CriterionVerdict>,
    #[serde(rename = "lemma2_I")]
    pub lemma2_i: Option<CriterionVerdict>,
    #[serde(rename = "lemma2_II")]
    pub lemma2_ii: Option<CriterionVerdict>,
}

impl CellCriteria {
    pub const NAMES: [&'static str; 7] = ["cor1", "cor2", "cor3", "cor4", "cor5", "lemma2_I", "lemma2_II"];

    pub fn get(&self, name: &str) -> Option<CriterionVerdict> {
        match name {
            "cor1" => self.cor1,
            "cor2" => self.cor2,
            "cor3" => self.cor3,
            "cor4" => self.cor4,
            "cor5" => self.cor5,
            "lemma2_I" => self.lemma2_i,
            "lemma2_II" => self.lemma2_ii,
            _ => None,
        }
    }

    fn values(&self) -> [Option<CriterionVerdict>; 7] {
        [
            self.cor1,
            self.cor2,
            self.cor3,
            self.cor4,
            self.cor5,
            self.lemma2_i,
            self.lemma2_ii,
        ]
    }
}

/// One grid point. Equilibrium fields describe the most stable equilibrium
/// (smallest dominant real part) and are `None` when no equilibrium exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub x: f64,
    pub y: f64,
    pub n_fixed_points: usize,
    pub n_stable: usize,
    pub dominant_re: Option<f64>,
    pub dominant_im: Option<f64>,
    /// Single inverter: its angle to the grid. Networks: largest line angle.
    pub delta_star: Option<f64>,
    /// Single inverter: its voltage. Networks: smallest voltage.
    #[serde(rename = "E_star")]
    pub e_star: Option<f64>,
    pub criteria: CellCriteria,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Cell {
    fn empty(x: f64, y: f64) -> Self {
        Cell {
            x,
            y,
            n_fixed_points: 0,
            n_stable: 0,
            dominant_re: None,
            dominant_im: None,
            delta_star: None,
            e_star: None,
            criteria: CellCriteria::default(),
            error: None,
        }
    }

    /// At least one linearly stable equilibrium.
    pub fn is_stable(&self) -> bool {
        self.n_stable > 0
    }
}

/// Cells in row-major order: `y` outer, `x` inner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityMap {
    pub x_path: String,
    pub y_path: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub cells: Vec<Cell>,
}

impl StabilityMap {
    pub fn cell(&self, ix: usize, iy: usize) -> &Cell {
        &self.cells[iy * self.xs.len() + ix]
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }
}

fn classify_all(sys: &System, eqs: &[Equilibrium]) -> Result<Vec<StabilityReport>> {
    eqs.iter()
        .map(|eq| {
            let lin = build_linearization(eq, &sys.params, &sys.net)?;
            eigen_stability(&full_jacobian(&lin), lin.mode())
        })
        .collect()
}

fn equilibrium_summary(sys: &System, eq: &Equilibrium) -> (f64, f64) {
    if sys.single.is_some() {
        return (eq.state.delta[0], eq.state.e[0]);
    }
    let d = &eq.state.delta;
    let max_angle = sys
        .net
        .couplings()
        .iter()
        .map(|&(j, l)| (d[j] - d[l]).abs())
        .fold(0.0, f64::max);
    let min_e = (0..sys.len())
        .filter(|&j| Some(j) != sys.slack)
        .map(|j| eq.state.e[j])
        .fold(f64::INFINITY, f64::min);
    (max_angle, min_e)
}

fn evaluate_cell(spec: &SweepSpec, def: &SystemDef, x: f64, y: f64) -> Result<Cell> {
    let sys = def.realize()?;
    let mut cell = Cell::empty(x, y);
    let eqs = sys.equilibria()?;
    cell.n_fixed_points = eqs.len();
    if eqs.is_empty() {
        return Ok(cell);
    }
    let (k, report) = if spec.wants(Evaluator::Eigen) || spec.evaluators.iter().any(|e| e.needs_criteria()) {
        let reports = classify_all(&sys, &eqs)?;
        cell.n_stable = reports.iter().filter(|r| r.is_stable()).count();
        let k = (0..reports.len())
            .min_by(|&a, &b| reports[a].dominant.re.total_cmp(&reports[b].dominant.re))
            .expect("non-empty");
        (k, Some(reports[k].clone()))
    } else {
        (0, None)
    };
    if let Some(r) = &report {
        cell.dominant_re = Some(r.dominant.re);
        cell.dominant_im = Some(r.dominant.im);
    }
    let (d, e) = equilibrium_summary(&sys, &eqs[k]);
    cell.delta_star = Some(d);
    cell.e_star = Some(e);

    if spec.evaluators.iter().any(|e| e.needs_criteria()) {
        let an = Analysis::new(&eqs[k], &sys.params, &sys.net)?;
        let c = &mut cell.criteria;
        if spec.wants(Evaluator::Cor1) {
            c.cor1 = Some(criteria::cor1_voltage(&an).verdict);
        }
        if spec.wants(Evaluator::Cor2) {
            c.cor2 = Some(criteria::cor2_instability(&an, &spec.subsets).verdict);
        }
        if spec.wants(Evaluator::Cor3) {
            c.cor3 = Some(criteria::cor3_necessary(&an).verdict);
        }
        if spec.wants(Evaluator::Cor4) {
            c.cor4 = Some(criteria::cor4_sufficient(&an).verdict);
        }
        if spec.wants(Evaluator::Cor5) {
            c.cor5 = Some(criteria::cor5_sufficient(&an).verdict);
        }
        if spec.wants(Evaluator::Lemma2) {
            c.lemma2_i = Some(criteria::lemma2_i(&an).verdict);
            c.lemma2_ii = Some(criteria::lemma2_ii(&an).verdict);
        }
    }
    Ok(cell)
}

/// Evaluates every grid cell independently. Per-cell failures are recorded
/// in the cell and never abort the sweep.
pub fn sweep(spec: &SweepSpec, exec: Execution) -> Result<StabilityMap> {
    spec.validate()?;
    let base = spec.base()?;
    let xs = spec.x.values();
    let ys = spec.y.values();
    let points: Vec<(f64, f64)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    let cells = parallel::map(&points, exec, |&(x, y)| {
        spec.at(&base, x, y)
            .and_then(|def| evaluate_cell(spec, &def, x, y))
            .unwrap_or_else(|e| Cell {
                error: Some(e.to_string()),
                ..Cell::empty(x, y)
            })
    });
    Ok(StabilityMap {
        x_path: spec.x.path.clone(),
        y_path: spec.y.path.clone(),
        xs,
        ys,
        cells,
    })
}

/// Whether the system at `(x, y)` has a linearly stable equilibrium.
pub fn stable_at(spec: &SweepSpec, x: f64, y: f64) -> bool {
    let run = || -> Result<bool> {
        let def = spec.at(&spec.base()?, x, y)?;
        let sys = def.realize()?;
        let eqs = sys.equilibria()?;
        Ok(classify_all(&sys, &eqs)?.iter().any(StabilityReport::is_stable))
    };
    run().unwrap_or(false)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the map with the columns
/// `x, y, n_stable, dominant_re, dominant_im, delta_star, E_star, cor1..cor5,
/// lemma2_I, lemma2_II`. Verdicts are 1/0/-1; absent values are empty.
pub fn write_csv<W: Write>(map: &StabilityMap, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "x",
        "y",
        "n_stable",
        "dominant_re",
        "dominant_im",
        "delta_star",
        "E_star",
    ];
    header.extend(CellCriteria::NAMES);
    w.write_record(&header)?;
    for c in &map.cells {
        let mut row = vec![
            c.x.to_string(),
            c.y.to_string(),
            c.n_stable.to_string(),
            opt(c.dominant_re),
            opt(c.dominant_im),
            opt(c.delta_star),
            opt(c.e_star),
        ];
        row.extend(
            c.criteria
                .values()
                .iter()
                .map(|v| v.map(|v| v.code().to_string()).unwrap_or_default()),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Edges of the cell grid carrying a boundary crossing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Edge {
    /// Between `(ix, iy)` and `(ix + 1, iy)`.
    H(usize, usize),
    /// Between `(ix, iy)` and `(ix, iy + 1)`.
    V(usize, usize),
}

fn bisect(spec: &SweepSpec, from: [f64; 2], to: [f64; 2], stable_from: bool) -> [f64; 2] {
    let (mut a, mut b) = (from, to);
    let dist = |p: [f64; 2], q: [f64; 2]| (p[0] - q[0]).abs().max((p[1] - q[1]).abs());
    while dist(a, b) > SEPARATRIX_TOL {
        let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
        if stable_at(spec, mid[0], mid[1]) == stable_from {
            a = mid;
        } else {
            b = mid;
        }
    }
    [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]
}

/// Polylines separating cells with and without a stable equilibrium.
///
/// Crossings are located by marching squares on the cell grid and each
/// crossing is refined by bisection on the model along its grid edge to
/// [`SEPARATRIX_TOL`]. Ambiguous saddle squares are split so that the
/// stable corners are disconnected.
pub fn separatrix(spec: &SweepSpec, map: &StabilityMap, exec: Execution) -> Vec<Vec<[f64; 2]>> {
    let (nx, ny) = (map.xs.len(), map.ys.len());
    let s = |ix: usize, iy: usize| map.cell(ix, iy).is_stable();
    let mut segments: Vec<(Edge, Edge)> = Vec::new();
    for iy in 0..ny.saturating_sub(1) {
        for ix in 0..nx.saturating_sub(1) {
            // corners counter-clockwise from bottom-left; edges bottom, right, top, left
            let corners = [s(ix, iy), s(ix + 1, iy), s(ix + 1, iy + 1), s(ix, iy + 1)];
            let edges = [
                Edge::H(ix, iy),
                Edge::V(ix + 1, iy),
                Edge::H(ix, iy + 1),
                Edge::V(ix, iy),
            ];
            let crossing: Vec<usize> = (0..4).filter(|&k| corners[k] != corners[(k + 1) % 4]).collect();
            match crossing.len() {
                2 => segments.push((edges[crossing[0]], edges[crossing[1]])),
                4 => {
                    // pair each edge with its neighbour so stable corners stay separate
                    let start = if corners[0] { 3 } else { 0 };
                    segments.push((edges[start % 4], edges[(start + 1) % 4]));
                    segments.push((edges[(start + 2) % 4], edges[(start + 3) % 4]));
                }
                _ => {}
            }
        }
    }
    if segments.is_empty() {
        return Vec::new();
    }

    let mut edge_list: Vec<Edge> = segments.iter().flat_map(|&(a, b)| [a, b]).collect();
    edge_list.sort_by_key(|e| match *e {
        Edge::H(x, y) => (0, y, x),
        Edge::V(x, y) => (1, y, x),
    });
    edge_list.dedup();
    let refined = parallel::map(&edge_list, exec, |&e| {
        let (p, q, sp) = match e {
            Edge::H(ix, iy) => ([map.xs[ix], map.ys[iy]], [map.xs[ix + 1], map.ys[iy]], s(ix, iy)),
            Edge::V(ix, iy) => ([map.xs[ix], map.ys[iy]], [map.xs[ix], map.ys[iy + 1]], s(ix, iy)),
        };
        bisect(spec, p, q, sp)
    });
    let point: HashMap<Edge, [f64; 2]> = edge_list.into_iter().zip(refined).collect();

    // chain segments through shared edges
    let mut by_edge: HashMap<Edge, Vec<usize>> = HashMap::new();
    for (k, &(a, b)) in segments.iter().enumerate() {
        by_edge.entry(a).or_default().push(k);
        by_edge.entry(b).or_default().push(k);
    }
    let mut used = vec![false; segments.len()];
    let mut lines = Vec::new();
    let other = |k: usize, e: Edge| {
        if segments[k].0 == e {
            segments[k].1
        } else {
            segments[k].0
        }
    };
    // start from open ends first so open polylines are not split
    let mut order: Vec<usize> = (0..segments.len())
        .filter(|&k| by_edge[&segments[k].0].len() == 1 || by_edge[&segments[k].1].len() == 1)
        .collect();
    order.extend(0..segments.len());
    for start in order {
        if used[start] {
            continue;
        }
        used[start] = true;
        let (a, b) = segments[start];
        let (head, mut tail) = if by_edge[&b].len() == 1 { (b, a) } else { (a, b) };
        let mut chain = vec![head, tail];
        while let Some(&next) = by_edge[&tail].iter().find(|&&k| !used[k]) {
            used[next] = true;
            tail = other(next, tail);
            chain.push(tail);
        }
        lines.push(chain.iter().map(|e| point[e]).collect());
    }
    lines
}

/// Outcome of comparing a criterion with the eigenvalue verdicts of a map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub criterion: String,
    /// Cells with an equilibrium and a verdict for the criterion.
    pub cells: usize,
    /// Cells whose verdict the criterion is meant to certify (eigen-stable,
    /// or eigen-unstable for an instability certificate).
    pub target: usize,
    pub certified: usize,
    /// Certified cells contradicting the eigenvalue verdict.
    pub violations: usize,
    /// `certified-and-correct / target`; zero when there is no target cell.
    pub coverage: f64,
    pub violating_cells: Vec<[f64; 2]>,
}

/// Audits a sufficient criterion against the eigenvalue verdicts: for the
/// instability certificate `cor2` a violation is a certified cell that is
/// stable; for all others a certified cell that is not stable.
pub fn containment_audit(map: &StabilityMap, criterion: &str) -> Result<AuditReport> {
    if !CellCriteria::NAMES.contains(&criterion) {
        return Err(Error::InvalidConfig(format!("unknown criterion `{criterion}`")));
    }
    let instability = criterion == "cor2";
    let mut r = AuditReport {
        criterion: criterion.to_string(),
        cells: 0,
        target: 0,
        certified: 0,
        violations: 0,
        coverage: 0.0,
        violating_cells: Vec::new(),
    };
    let mut hits = 0usize;
    for c in &map.cells {
        let Some(v) = c.criteria.get(criterion) else { continue };
        if c.n_fixed_points == 0 {
            continue;
        }
        r.cells += 1;
        let goal = c.is_stable() != instability;
        if goal {
            r.target += 1;
        }
        if v == CriterionVerdict::Satisfied {
            r.certified += 1;
            if goal {
                hits += 1;
            } else {
                r.violations += 1;
                r.violating_cells.push([c.x, c.y]);
            }
        }
    }
    r.coverage = if r.target > 0 {
        hits as f64 / r.target as f64
    } else {
        0.0
    };
    Ok(r)
}
