//! Radial feeder model and the separable voltage constraints built from it.
//!
//! Voltages follow the linearized branch-flow model in squared form:
//! `v_j² = V0² + 2 Σ_i (R(j,i)·p_i + X(j,i)·q_i)` in per-unit, where `R(j,i)`
//! and `X(j,i)` are the resistance and reactance of the path shared by node
//! `j` and prosumer `i`'s connection node, both measured from the head node.
//! Injections are positive when exported into the feeder.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("feeder topology: {0}")]
    Topology(String),
    #[error("line list contains a cycle through node {0}")]
    Cycle(usize),
    #[error("node {0} is not reachable from the head node")]
    Disconnected(usize),
    #[error("prosumer {prosumer} is connected to invalid node {node}")]
    Connection { prosumer: usize, node: usize },
    #[error("voltage band must satisfy 0 < v_min < V0 < v_max (got {v_min}, {nominal}, {v_max})")]
    Band {
        v_min: f64,
        nominal: f64,
        v_max: f64,
    },
    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("linearized squared voltage {value} at node {node} is not positive")]
    ModelValidity { node: usize, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub resistance_ohm: f64,
    pub reactance_ohm: f64,
}

/// Feeder description as it appears in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeederTopology {
    pub nodes: Vec<String>,
    pub head: usize,
    pub lines: Vec<Line>,
    pub base_voltage_kv: f64,
    pub base_power_kva: f64,
    pub nominal_voltage_pu: f64,
    /// Connection node of each prosumer, indexed by prosumer.
    pub connections: Vec<usize>,
}

/// Parent pointers of the feeder rooted at its head node.
#[derive(Debug, Clone)]
struct RootedTree {
    parent: Vec<Option<(usize, usize)>>,
    order: Vec<usize>,
}

impl FeederTopology {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_prosumers(&self) -> usize {
        self.connections.len()
    }

    /// Ohms to per-unit on this feeder's bases.
    pub fn impedance_base_ohm(&self) -> f64 {
        self.base_voltage_kv * self.base_voltage_kv * 1000.0 / self.base_power_kva
    }

    pub fn validate(&self) -> Result<(), GridError> {
        self.rooted().map(|_| ())
    }

    fn rooted(&self) -> Result<RootedTree, GridError> {
        let k = self.num_nodes();
        if k == 0 || self.head >= k {
            return Err(GridError::Topology("head node missing".into()));
        }
        if !(self.base_voltage_kv > 0.0
            && self.base_power_kva > 0.0
            && self.nominal_voltage_pu > 0.0)
        {
            return Err(GridError::Topology(
                "bases and nominal voltage must be positive".into(),
            ));
        }
        let mut adj = vec![Vec::new(); k];
        for (l, line) in self.lines.iter().enumerate() {
            if line.from >= k || line.to >= k || line.from == line.to {
                return Err(GridError::Topology(format!(
                    "line {l} has invalid endpoints"
                )));
            }
            if !(line.resistance_ohm >= 0.0 && line.reactance_ohm >= 0.0)
                || !line.resistance_ohm.is_finite()
                || !line.reactance_ohm.is_finite()
            {
                return Err(GridError::Topology(format!(
                    "line {l} needs finite nonnegative impedance"
                )));
            }
            adj[line.from].push((line.to, l));
            adj[line.to].push((line.from, l));
        }

        let mut parent: Vec<Option<(usize, usize)>> = vec![None; k];
        let mut seen = vec![false; k];
        let mut order = Vec::with_capacity(k);
        let mut queue = VecDeque::from([self.head]);
        seen[self.head] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &(v, l) in &adj[u] {
                if parent[u].map(|(_, pl)| pl) == Some(l) {
                    continue;
                }
                if seen[v] {
                    return Err(GridError::Cycle(v));
                }
                seen[v] = true;
                parent[v] = Some((u, l));
                queue.push_back(v);
            }
        }
        if let Some(node) = seen.iter().position(|s| !s) {
            return Err(GridError::Disconnected(node));
        }
        for (prosumer, &node) in self.connections.iter().enumerate() {
            if node >= k || node == self.head {
                return Err(GridError::Connection { prosumer, node });
            }
        }
        Ok(RootedTree { parent, order })
    }
}

/// Path-sum sensitivities in per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMatrices {
    /// Node × node shared-path resistance.
    pub node_r: DMatrix<f64>,
    pub node_x: DMatrix<f64>,
    /// Node × prosumer shared-path resistance.
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub head: usize,
    pub nominal_voltage_pu: f64,
    pub base_power_kva: f64,
    pub node_names: Vec<String>,
}

impl SensitivityMatrices {
    pub fn num_nodes(&self) -> usize {
        self.r.nrows()
    }

    pub fn num_prosumers(&self) -> usize {
        self.r.ncols()
    }

    /// Per-unit squared voltages `V0² + 2(Rp + Xq)` for injections in kW/kVar.
    pub fn squared_voltages(&self, p_kw: &[f64], q_kvar: &[f64]) -> Result<Vec<f64>, GridError> {
        let n = self.num_prosumers();
        if p_kw.len() != n || q_kvar.len() != n {
            return Err(GridError::Dimension(format!(
                "expected {n} prosumer injections, got p {} q {}",
                p_kw.len(),
                q_kvar.len()
            )));
        }
        let v0sq = self.nominal_voltage_pu * self.nominal_voltage_pu;
        Ok((0..self.num_nodes())
            .map(|j| {
                let s: f64 = (0..n)
                    .map(|i| self.r[(j, i)] * p_kw[i] + self.x[(j, i)] * q_kvar[i])
                    .sum();
                v0sq + 2.0 * s / self.base_power_kva
            })
            .collect())
    }
}

pub fn build_sensitivities(topology: &FeederTopology) -> Result<SensitivityMatrices, GridError> {
    let tree = topology.rooted()?;
    let k = topology.num_nodes();
    let zbase = topology.impedance_base_ohm();

    // ancestors[j] = nodes on the head→j path, with cumulative impedance.
    let mut cum_r = vec![0.0; k];
    let mut cum_x = vec![0.0; k];
    let mut depth = vec![0usize; k];
    for &v in &tree.order {
        if let Some((u, l)) = tree.parent[v] {
            let line = &topology.lines[l];
            cum_r[v] = cum_r[u] + line.resistance_ohm / zbase;
            cum_x[v] = cum_x[u] + line.reactance_ohm / zbase;
            depth[v] = depth[u] + 1;
        }
    }
    let lca = |mut a: usize, mut b: usize| {
        while depth[a] > depth[b] {
            a = tree.parent[a].unwrap().0;
        }
        while depth[b] > depth[a] {
            b = tree.parent[b].unwrap().0;
        }
        while a != b {
            a = tree.parent[a].unwrap().0;
            b = tree.parent[b].unwrap().0;
        }
        a
    };

    let mut node_r = DMatrix::zeros(k, k);
    let mut node_x = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let c = lca(a, b);
            node_r[(a, b)] = cum_r[c];
            node_r[(b, a)] = cum_r[c];
            node_x[(a, b)] = cum_x[c];
            node_x[(b, a)] = cum_x[c];
        }
    }
    let n = topology.num_prosumers();
    let r = DMatrix::from_fn(k, n, |j, i| node_r[(j, topology.connections[i])]);
    let x = DMatrix::from_fn(k, n, |j, i| node_x[(j, topology.connections[i])]);
    Ok(SensitivityMatrices {
        node_r,
        node_x,
        r,
        x,
        head: topology.head,
        nominal_voltage_pu: topology.nominal_voltage_pu,
        base_power_kva: topology.base_power_kva,
        node_names: topology.nodes.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Upper,
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowLabel {
    pub node: usize,
    pub side: Side,
    pub name: String,
}

/// Separable affine grid constraints `Σ_i g_it(p_i, q_i) <= ν(t)`.
///
/// Coefficients are stored once per row and prosumer in per-unit (squared
/// voltage per per-unit injection); [`ConstraintSet::evaluate_g`] accepts kW
/// and kVar. Bounds may vary with `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub rows: Vec<RowLabel>,
    coeff_p: DMatrix<f64>,
    coeff_q: DMatrix<f64>,
    bounds: DMatrix<f64>,
    base_power_kva: f64,
}

impl ConstraintSet {
    /// Generic constructor for arbitrary affine rows (thermal limits and the
    /// like). `coeff_p`/`coeff_q` are M × N, `bounds` is M × T.
    pub fn from_parts(
        rows: Vec<RowLabel>,
        coeff_p: DMatrix<f64>,
        coeff_q: DMatrix<f64>,
        bounds: DMatrix<f64>,
        base_power_kva: f64,
    ) -> Result<Self, GridError> {
        let m = rows.len();
        if coeff_p.nrows() != m
            || coeff_q.nrows() != m
            || bounds.nrows() != m
            || coeff_p.ncols() != coeff_q.ncols()
        {
            return Err(GridError::Dimension("constraint set blocks".into()));
        }
        if !(base_power_kva > 0.0) {
            return Err(GridError::Dimension("base power must be positive".into()));
        }
        Ok(Self {
            rows,
            coeff_p,
            coeff_q,
            bounds,
            base_power_kva,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_prosumers(&self) -> usize {
        self.coeff_p.ncols()
    }

    pub fn horizon(&self) -> usize {
        self.bounds.ncols()
    }

    pub fn base_power_kva(&self) -> f64 {
        self.base_power_kva
    }

    /// ν(t)
    pub fn bound(&self, t: usize) -> Vec<f64> {
        self.bounds.column(t).iter().copied().collect()
    }

    pub fn bounds(&self) -> &DMatrix<f64> {
        &self.bounds
    }

    pub fn with_bounds(mut self, bounds: DMatrix<f64>) -> Result<Self, GridError> {
        if bounds.nrows() != self.num_rows() {
            return Err(GridError::Dimension(
                "bounds must have one row per constraint".into(),
            ));
        }
        self.bounds = bounds;
        Ok(self)
    }

    /// Per-unit coefficients of prosumer `i` on `row`.
    pub fn coefficient_pu(&self, row: usize, i: usize) -> (f64, f64) {
        (self.coeff_p[(row, i)], self.coeff_q[(row, i)])
    }

    /// Coefficients of prosumer `i` on `row` per kW and per kVar.
    pub fn coefficient_per_kw(&self, row: usize, i: usize) -> (f64, f64) {
        (
            self.coeff_p[(row, i)] / self.base_power_kva,
            self.coeff_q[(row, i)] / self.base_power_kva,
        )
    }

    fn check(&self, i: usize, t: usize) -> Result<(), GridError> {
        if i >= self.num_prosumers() {
            return Err(GridError::IndexOutOfRange {
                what: "prosumer",
                index: i,
                len: self.num_prosumers(),
            });
        }
        if t >= self.horizon() {
            return Err(GridError::IndexOutOfRange {
                what: "time step",
                index: t,
                len: self.horizon(),
            });
        }
        Ok(())
    }

    /// Contribution `g_it(p, q)` of prosumer `i` at step `t`.
    pub fn evaluate_g(
        &self,
        i: usize,
        t: usize,
        p_kw: f64,
        q_kvar: f64,
    ) -> Result<Vec<f64>, GridError> {
        self.check(i, t)?;
        Ok((0..self.num_rows())
            .map(|r| {
                let (cp, cq) = self.coefficient_per_kw(r, i);
                cp * p_kw + cq * q_kvar
            })
            .collect())
    }

    /// Global map `F_t(p, q)` (time-invariant here; `t` only validates).
    pub fn evaluate_global(
        &self,
        t: usize,
        p_kw: &[f64],
        q_kvar: &[f64],
    ) -> Result<Vec<f64>, GridError> {
        let n = self.num_prosumers();
        if p_kw.len() != n || q_kvar.len() != n {
            return Err(GridError::Dimension("injection vectors".into()));
        }
        if n > 0 {
            self.check(0, t)?;
        }
        Ok((0..self.num_rows())
            .map(|r| {
                (0..n)
                    .map(|i| {
                        let (cp, cq) = self.coefficient_per_kw(r, i);
                        cp * p_kw[i] + cq * q_kvar[i]
                    })
                    .sum()
            })
            .collect())
    }
}

/// Voltage rows for every non-head node whose voltage is not pinned to that
/// of the head or of an earlier node by zero-impedance ties.
pub fn assemble_constraints(
    sens: &SensitivityMatrices,
    v_min: f64,
    v_max: f64,
    horizon: usize,
) -> Result<ConstraintSet, GridError> {
    assemble_constraints_for(sens, &distinct_nodes(sens), v_min, v_max, horizon)
}

/// Non-head nodes with pairwise distinct sensitivity rows, first occurrence
/// kept; nodes electrically identical to the head are dropped.
pub fn distinct_nodes(sens: &SensitivityMatrices) -> Vec<usize> {
    let same = |a: usize, b: usize| {
        sens.node_r.row(a) == sens.node_r.row(b) && sens.node_x.row(a) == sens.node_x.row(b)
    };
    let mut kept: Vec<usize> = Vec::new();
    for j in 0..sens.num_nodes() {
        if j != sens.head && !same(j, sens.head) && !kept.iter().any(|&k| same(j, k)) {
            kept.push(j);
        }
    }
    kept
}

/// Voltage rows for the listed nodes, in the given order: for each node an
/// upper row `2(Rp + Xq) <= v_max² − V0²` then a lower row
/// `−2(Rp + Xq) <= V0² − v_min²`.
pub fn assemble_constraints_for(
    sens: &SensitivityMatrices,
    nodes: &[usize],
    v_min: f64,
    v_max: f64,
    horizon: usize,
) -> Result<ConstraintSet, GridError> {
    let v0 = sens.nominal_voltage_pu;
    if !(v_min > 0.0 && v_min < v0 && v0 < v_max) {
        return Err(GridError::Band {
            v_min,
            nominal: v0,
            v_max,
        });
    }
    for &j in nodes {
        if j >= sens.num_nodes() {
            return Err(GridError::IndexOutOfRange {
                what: "node",
                index: j,
                len: sens.num_nodes(),
            });
        }
    }
    let m = 2 * nodes.len();
    let n = sens.num_prosumers();
    let mut rows = Vec::with_capacity(m);
    let mut cp = DMatrix::zeros(m, n);
    let mut cq = DMatrix::zeros(m, n);
    let mut nu = DMatrix::zeros(m, horizon);
    let up = v_max * v_max - v0 * v0;
    let down = v0 * v0 - v_min * v_min;
    for (k, &j) in nodes.iter().enumerate() {
        for (off, side, sign, rhs) in [(0, Side::Upper, 1.0, up), (1, Side::Lower, -1.0, down)] {
            let row = 2 * k + off;
            for i in 0..n {
                cp[(row, i)] = sign * 2.0 * sens.r[(j, i)];
                cq[(row, i)] = sign * 2.0 * sens.x[(j, i)];
            }
            for t in 0..horizon {
                nu[(row, t)] = rhs;
            }
            let tag = match side {
                Side::Upper => "upper",
                Side::Lower => "lower",
            };
            rows.push(RowLabel {
                node: j,
                side,
                name: format!("{}:{tag}", sens.node_names[j]),
            });
        }
    }
    ConstraintSet::from_parts(rows, cp, cq, nu, sens.base_power_kva)
}

/// Per-node voltage magnitudes (pu) under the linearized model. Reporting
/// only; feasibility decisions use the squared-form rows.
pub fn voltage_profile(
    sens: &SensitivityMatrices,
    p_kw: &[f64],
    q_kvar: &[f64],
) -> Result<Vec<f64>, GridError> {
    sens.squared_voltages(p_kw, q_kvar)?
        .into_iter()
        .enumerate()
        .map(|(node, value)| {
            if value > 0.0 {
                Ok(value.sqrt())
            } else {
                Err(GridError::ModelValidity { node, value })
            }
        })
        .collect()
}
