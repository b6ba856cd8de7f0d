//! Independent oracles shared by the integration and acceptance tests.
//!
//! None of these call into the solver stack; they work from the raw problem
//! data with dense linear algebra, exhaustive enumeration or grid search.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use doe_market::doe::DoeAllocation;
use doe_market::grid::{ConstraintSet, FeederTopology, Line};
use doe_market::prosumer::{ProsumerSpec, QuadraticUtility, TradingRules};
use doe_market::qp::{QuadraticProgram, SparseMatrix};
use doe_market::scenario::{Scenario, VoltageBand, SCHEMA_VERSION};

pub const FIXTURE: &str = concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/tests/fixtures/ieee13_desk.json"
);

// ---------------------------------------------------------------------------
// Active-set enumeration QP oracle
// ---------------------------------------------------------------------------

pub struct EnumeratedOptimum {
    pub x: Vec<f64>,
    pub objective: f64,
}

/// Enumerates every subset of inequality and bound rows (at most `n` rows),
/// solves the equality-constrained KKT system of each with an SVD
/// pseudo-inverse, and keeps the best point that is primal feasible with
/// nonnegative multipliers. `None` means no KKT point exists.
pub fn enumerate_qp(qp: &QuadraticProgram) -> Option<EnumeratedOptimum> {
    let n = qp.num_variables();
    let p = qp.objective_matrix.to_dense();
    let c = DVector::from_column_slice(&qp.objective_vector);
    let a_eq = qp.eq_matrix.to_dense();
    let b_eq = &qp.eq_rhs;
    let mut g_rows: Vec<(DVector<f64>, f64)> = Vec::new();
    let ineq = qp.ineq_matrix.to_dense();
    for r in 0..ineq.nrows() {
        g_rows.push((ineq.row(r).transpose(), qp.ineq_rhs[r]));
    }
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        if qp.upper[j].is_finite() {
            g_rows.push((e.clone(), qp.upper[j]));
        }
        if qp.lower[j].is_finite() {
            g_rows.push((-e, -qp.lower[j]));
        }
    }
    let me = a_eq.nrows();
    let mg = g_rows.len();
    assert!(mg <= 20, "enumeration oracle limited to 20 inequality rows");
    let feasible = |x: &DVector<f64>| {
        (0..me).all(|r| {
            (a_eq.row(r).dot(&x.transpose()) - b_eq[r]).abs() <= 1e-9 * (1.0 + b_eq[r].abs())
        }) && g_rows
            .iter()
            .all(|(g, h)| g.dot(x) <= h + 1e-9 * (1.0 + h.abs()))
    };
    let mut best: Option<EnumeratedOptimum> = None;
    for mask in 0u32..(1 << mg) {
        let active: Vec<usize> = (0..mg).filter(|&k| mask & (1 << k) != 0).collect();
        if active.len() > n {
            continue;
        }
        let m = me + active.len();
        let dim = n + m;
        let mut kkt = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p);
        for j in 0..n {
            rhs[j] = -c[j];
        }
        for r in 0..me {
            for j in 0..n {
                kkt[(n + r, j)] = a_eq[(r, j)];
                kkt[(j, n + r)] = a_eq[(r, j)];
            }
            rhs[n + r] = b_eq[r];
        }
        for (k, &g) in active.iter().enumerate() {
            let (row, h) = &g_rows[g];
            for j in 0..n {
                kkt[(n + me + k, j)] = row[j];
                kkt[(j, n + me + k)] = row[j];
            }
            rhs[n + me + k] = *h;
        }
        let svd = kkt.clone().svd(true, true);
        let Ok(z) = svd.solve(&rhs, 1e-11) else {
            continue;
        };
        let scale = 1.0 + rhs.amax() + kkt.amax();
        if (&kkt * &z - &rhs).amax() > 1e-9 * scale {
            continue;
        }
        let x = z.rows(0, n).into_owned();
        if (0..active.len()).any(|k| z[n + me + k] < -1e-9) || !feasible(&x) {
            continue;
        }
        let objective = 0.5 * x.dot(&(&p * &x)) + c.dot(&x);
        if best.as_ref().is_none_or(|b| objective < b.objective) {
            best = Some(EnumeratedOptimum {
                x: x.iter().copied().collect(),
                objective,
            });
        }
    }
    best
}

/// Seeded random QP with at most 8 variables and at most 14 inequality and
/// bound rows. Positive definite objectives use a few finite bounds; PSD
/// objectives get full boxes so the problem stays bounded. Every fifth
/// problem contains a contradictory pair of rows.
pub fn random_qp(seed: u64) -> (QuadraticProgram, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let definite = seed % 3 != 2;
    let n = if definite {
        rng.random_range(1..=8)
    } else {
        rng.random_range(2..=4)
    };
    let rank = if definite { n } else { rng.random_range(1..n) };
    let l = DMatrix::from_fn(n, rank, |_, _| rng.random_range(-1.0..1.0));
    let mut p = &l * l.transpose();
    if definite {
        p += DMatrix::identity(n, n) * 0.1;
    }
    let p = (&p + p.transpose()) * 0.5;
    let c: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dot = |row: &[f64]| row.iter().zip(&x0).map(|(a, b)| a * b).sum::<f64>();

    let me = rng.random_range(0..=(n - 1).min(2));
    let eq: Vec<Vec<f64>> = (0..me)
        .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let eq_rhs: Vec<f64> = eq.iter().map(|r| dot(r)).collect();

    let mi = rng.random_range(0..=3);
    let mut ineq: Vec<Vec<f64>> = (0..mi)
        .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut ineq_rhs: Vec<f64> = ineq
        .iter()
        .map(|r| {
            dot(r)
                + if rng.random_bool(0.3) {
                    0.0
                } else {
                    rng.random_range(0.0..1.0)
                }
        })
        .collect();
    let infeasible = seed % 5 == 4;
    if infeasible {
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = dot(&g);
        ineq.push(g.clone());
        ineq_rhs.push(v - 0.5);
        ineq.push(g.iter().map(|a| -a).collect());
        ineq_rhs.push(-v - 0.5);
    }

    let mut lower = vec![f64::NEG_INFINITY; n];
    let mut upper = vec![f64::INFINITY; n];
    let boxed = if definite {
        rng.random_range(0..=n.min(4))
    } else {
        n
    };
    for j in 0..boxed {
        lower[j] = x0[j] - rng.random_range(0.0..1.0);
        upper[j] = x0[j] + rng.random_range(0.0..1.0);
    }
    let triplets = |rows: &[Vec<f64>]| {
        rows.iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().enumerate().map(move |(j, &v)| (r, j, v)))
            .collect::<Vec<_>>()
    };
    let obj: Vec<(usize, usize, f64)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, p[(i, j)]))
        .collect();
    let qp = QuadraticProgram {
        objective_matrix: SparseMatrix::from_triplets(n, n, &obj),
        objective_vector: c,
        eq_matrix: SparseMatrix::from_triplets(me, n, &triplets(&eq)),
        eq_rhs,
        ineq_matrix: SparseMatrix::from_triplets(ineq.len(), n, &triplets(&ineq)),
        ineq_rhs,
        lower,
        upper,
    };
    (qp, infeasible)
}

// ---------------------------------------------------------------------------
// AC power-flow oracle
// ---------------------------------------------------------------------------

/// Nonlinear DistFlow on a radial feeder, solved by backward/forward sweeps
/// with the head as slack at its nominal voltage. Injections in kW and kVar
/// per prosumer; returns voltage magnitudes (pu) per node.
pub fn ac_voltages(f: &FeederTopology, p_kw: &[f64], q_kvar: &[f64]) -> Vec<f64> {
    let nn = f.nodes.len();
    let zb = f.base_voltage_kv * f.base_voltage_kv * 1000.0 / f.base_power_kva;
    let mut inj_p = vec![0.0; nn];
    let mut inj_q = vec![0.0; nn];
    for (i, &node) in f.connections.iter().enumerate() {
        inj_p[node] += p_kw[i] / f.base_power_kva;
        inj_q[node] += q_kvar[i] / f.base_power_kva;
    }
    // (parent, child, r, x) in head-first order.
    let mut edges: Vec<(usize, usize, f64, f64)> = Vec::new();
    let mut reached = vec![false; nn];
    reached[f.head] = true;
    let mut used = vec![false; f.lines.len()];
    while edges.len() < f.lines.len() {
        let before = edges.len();
        for (k, l) in f.lines.iter().enumerate() {
            if used[k] {
                continue;
            }
            let (r, x) = (l.resistance_ohm / zb, l.reactance_ohm / zb);
            if reached[l.from] {
                edges.push((l.from, l.to, r, x));
            } else if reached[l.to] {
                edges.push((l.to, l.from, r, x));
            } else {
                continue;
            }
            used[k] = true;
            reached[edges.last().unwrap().1] = true;
        }
        assert!(edges.len() > before, "feeder is not connected");
    }
    let mut v2 = vec![f.nominal_voltage_pu.powi(2); nn];
    let mut pf = vec![0.0; edges.len()];
    let mut qf = vec![0.0; edges.len()];
    for _ in 0..500 {
        let prev = v2.clone();
        // Backward: sending-end flow = downstream demand plus line losses.
        let mut demand_p: Vec<f64> = inj_p.iter().map(|v| -v).collect();
        let mut demand_q: Vec<f64> = inj_q.iter().map(|v| -v).collect();
        for (k, &(a, b, r, x)) in edges.iter().enumerate().rev() {
            let ell = (pf[k] * pf[k] + qf[k] * qf[k]) / v2[a];
            pf[k] = demand_p[b] + r * ell;
            qf[k] = demand_q[b] + x * ell;
            demand_p[a] += pf[k];
            demand_q[a] += qf[k];
        }
        for (k, &(a, b, r, x)) in edges.iter().enumerate() {
            let ell = (pf[k] * pf[k] + qf[k] * qf[k]) / v2[a];
            v2[b] = v2[a] - 2.0 * (r * pf[k] + x * qf[k]) + (r * r + x * x) * ell;
        }
        if v2.iter().zip(&prev).all(|(a, b)| (a - b).abs() < 1e-14) {
            break;
        }
    }
    v2.iter().map(|v| v.sqrt()).collect()
}

// ---------------------------------------------------------------------------
// Two-prosumer welfare oracles
// ---------------------------------------------------------------------------

pub const GRID_STEP: f64 = 1e-3;

struct ScalarProsumer {
    theta: f64,
    target: f64,
    terminal: f64,
    goal: f64,
    x0: f64,
    lo: f64,
    hi: f64,
    supply: Vec<f64>,
}

impl ScalarProsumer {
    fn from_spec(p: &ProsumerSpec) -> Self {
        assert_eq!((p.num_states(), p.num_inputs()), (1, 1));
        assert_eq!((p.a[(0, 0)], p.b[(0, 0)], p.h[0]), (1.0, 1.0, 1.0));
        assert!(p.utility.state_weights.iter().all(|w| w[(0, 0)] == 0.0));
        let (lo, hi) = (p.u_lower[(0, 0)], p.u_upper[(0, 0)]);
        assert!(p.u_lower.iter().all(|&v| v == lo) && p.u_upper.iter().all(|&v| v == hi));
        // Storage and injection limits must be slack for every grid point.
        let reach = hi.abs().max(lo.abs()) * p.horizon() as f64;
        assert!(p.x_lower[0] < p.x0[0] - reach && p.x_upper[0] > p.x0[0] + reach);
        let cap = p.net_supply.iter().fold(0.0f64, |m, a| m.max(a.abs())) + reach;
        assert!(p.p_lower <= -cap && p.p_upper >= cap);
        ScalarProsumer {
            theta: p.utility.input_weight[(0, 0)],
            target: p.utility.input_target[0],
            terminal: p.utility.terminal_weight[(0, 0)],
            goal: p.utility.terminal_target[0],
            x0: p.x0[0],
            lo,
            hi,
            supply: p.net_supply.clone(),
        }
    }

    fn utility(&self, u: &[f64]) -> f64 {
        let stage: f64 = u
            .iter()
            .map(|v| self.theta * (v - self.target).powi(2))
            .sum();
        let end = self.x0 + u.iter().sum::<f64>() - self.goal;
        -stage - self.terminal * end * end
    }

    fn gradient(&self, u: &[f64]) -> Vec<f64> {
        let end = self.x0 + u.iter().sum::<f64>() - self.goal;
        u.iter()
            .map(|v| -2.0 * self.theta * (v - self.target) - 2.0 * self.terminal * end)
            .collect()
    }
}

pub struct GridOptimum {
    pub welfare: f64,
    pub u: [Vec<f64>; 2],
}

/// Exact maximum of the pair welfare over the 1e-3 input grid.
///
/// With wide injection limits the balance and supply rows reduce to
/// `u₁(t) + u₂(t) ≤ a₁(t) + a₂(t)`. The second prosumer's best grid response
/// to every pair of caps is tabulated with running maxima, so the search
/// visits every grid point of both prosumers without the quartic cost.
pub fn pair_grid_search(s: &Scenario) -> GridOptimum {
    assert_eq!(s.prosumers.len(), 2);
    assert!(!s.flags.reactive_trading && !s.flags.limit_trading);
    let a = ScalarProsumer::from_spec(&s.prosumers[0]);
    let b = ScalarProsumer::from_spec(&s.prosumers[1]);
    assert_eq!((a.lo, a.hi), (b.lo, b.hi));
    let horizon = s.horizon;
    assert!(horizon == 1 || horizon == 2);
    let lo = a.lo;
    let k_max = ((a.hi - a.lo) / GRID_STEP).round() as i64;
    let val = |k: i64| lo + k as f64 * GRID_STEP;
    let total: Vec<f64> = (0..horizon).map(|t| a.supply[t] + b.supply[t]).collect();
    // Largest index of prosumer 2 allowed when prosumer 1 sits at index k.
    let cap =
        |t: usize, k: i64| -> i64 { ((total[t] - val(k) - lo) / GRID_STEP + 1e-7).floor() as i64 };

    if horizon == 1 {
        let mut prefix = Vec::with_capacity(k_max as usize + 1);
        let mut best = (f64::NEG_INFINITY, 0);
        for k in 0..=k_max {
            let v = b.utility(&[val(k)]);
            if v > best.0 {
                best = (v, k);
            }
            prefix.push(best);
        }
        let mut out = (f64::NEG_INFINITY, 0, 0);
        for k in 0..=k_max {
            let c = cap(0, k);
            if c < 0 {
                continue;
            }
            let (v2, k2) = prefix[c.min(k_max) as usize];
            let w = a.utility(&[val(k)]) + v2;
            if w > out.0 {
                out = (w, k, k2);
            }
        }
        return GridOptimum {
            welfare: out.0,
            u: [vec![val(out.1)], vec![val(out.2)]],
        };
    }

    let width = k_max as usize + 1;
    // g[c1] = (value, k0, k1): best response of prosumer 2 with first-step
    // index ≤ the processed cap and second-step index ≤ c1.
    let mut g = vec![(f64::NEG_INFINITY, 0i64, 0i64); width];
    let mut done: i64 = -1;
    let mut row = vec![(f64::NEG_INFINITY, 0i64); width];
    let mut out = (f64::NEG_INFINITY, [0i64; 4]);
    for k0 in (0..=k_max).rev() {
        let c0 = cap(0, k0);
        if c0 < 0 {
            continue;
        }
        let c0 = c0.min(k_max);
        while done < c0 {
            done += 1;
            let mut best = (f64::NEG_INFINITY, 0);
            for k1 in 0..=k_max {
                let v = b.utility(&[val(done), val(k1)]);
                if v > best.0 {
                    best = (v, k1);
                }
                row[k1 as usize] = best;
            }
            for (gi, ri) in g.iter_mut().zip(&row) {
                if ri.0 > gi.0 {
                    *gi = (ri.0, done, ri.1);
                }
            }
        }
        for k1 in 0..=k_max {
            let c1 = cap(1, k1);
            if c1 < 0 {
                continue;
            }
            let (v2, j0, j1) = g[c1.min(k_max) as usize];
            let w = a.utility(&[val(k0), val(k1)]) + v2;
            if w > out.0 {
                out = (w, [k0, k1, j0, j1]);
            }
        }
    }
    let [k0, k1, j0, j1] = out.1;
    GridOptimum {
        welfare: out.0,
        u: [vec![val(k0), val(k1)], vec![val(j0), val(j1)]],
    }
}

/// Closed-form KKT point of the pair assuming every step's supply coupling
/// binds: `∇F₁ = ∇F₂ = λ` componentwise and `u₁ + u₂ = a₁ + a₂`.
pub fn pair_hand_kkt(s: &Scenario) -> (Vec<f64>, [Vec<f64>; 2]) {
    let a = ScalarProsumer::from_spec(&s.prosumers[0]);
    let b = ScalarProsumer::from_spec(&s.prosumers[1]);
    let t_n = s.horizon;
    // Unknowns: u₁(0..T), u₂(0..T), λ(0..T).
    let dim = 3 * t_n;
    let mut m = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    for (block, p) in [(0, &a), (1, &b)] {
        for t in 0..t_n {
            let row = block * t_n + t;
            // −2θ(u_t − ū) − 2w(x0 + Σu − goal) − λ_t = 0
            m[(row, block * t_n + t)] -= 2.0 * p.theta;
            for s2 in 0..t_n {
                m[(row, block * t_n + s2)] -= 2.0 * p.terminal;
            }
            m[(row, 2 * t_n + t)] = -1.0;
            rhs[row] = -2.0 * p.theta * p.target + 2.0 * p.terminal * (p.x0 - p.goal);
        }
    }
    for t in 0..t_n {
        let row = 2 * t_n + t;
        m[(row, t)] = 1.0;
        m[(row, t_n + t)] = 1.0;
        rhs[row] = a.supply[t] + b.supply[t];
    }
    let z = m.lu().solve(&rhs).expect("pair KKT system is nonsingular");
    let u1: Vec<f64> = (0..t_n).map(|t| z[t]).collect();
    let u2: Vec<f64> = (0..t_n).map(|t| z[t_n + t]).collect();
    let lambda: Vec<f64> = (0..t_n).map(|t| z[2 * t_n + t]).collect();
    for (g, l) in a.gradient(&u1).iter().zip(&lambda) {
        assert!((g - l).abs() < 1e-9);
    }
    (lambda, [u1, u2])
}

pub fn pair_welfare(s: &Scenario, u: &[Vec<f64>; 2]) -> f64 {
    ScalarProsumer::from_spec(&s.prosumers[0]).utility(&u[0])
        + ScalarProsumer::from_spec(&s.prosumers[1]).utility(&u[1])
}

// ---------------------------------------------------------------------------
// Envelope oracle
// ---------------------------------------------------------------------------

/// Head, one midpoint and one end node in a chain, one prosumer at each
/// non-head node, and only the end node's voltage constrained (two rows).
pub fn chain_scenario() -> Scenario {
    let feeder = FeederTopology {
        nodes: vec!["0".into(), "1".into(), "2".into()],
        head: 0,
        lines: vec![
            Line {
                from: 0,
                to: 1,
                resistance_ohm: 0.4,
                reactance_ohm: 0.3,
            },
            Line {
                from: 1,
                to: 2,
                resistance_ohm: 0.6,
                reactance_ohm: 0.2,
            },
        ],
        base_voltage_kv: 0.4,
        base_power_kva: 100.0,
        nominal_voltage_pu: 1.0,
        connections: vec![1, 2],
    };
    let prosumer = |p_hi: f64| {
        let z = DMatrix::zeros(1, 1);
        ProsumerSpec {
            a: DMatrix::identity(1, 1),
            b: DMatrix::identity(1, 1),
            x0: vec![0.0],
            x_lower: vec![-10.0],
            x_upper: vec![10.0],
            u_lower: DMatrix::from_element(1, 1, -1.0),
            u_upper: DMatrix::from_element(1, 1, 1.0),
            p_lower: -p_hi,
            p_upper: p_hi,
            q_lower: -3.0,
            q_upper: 3.0,
            net_supply: vec![p_hi],
            h: vec![1.0],
            utility: QuadraticUtility {
                input_weight: DMatrix::identity(1, 1),
                input_target: vec![0.0],
                state_weights: vec![z.clone()],
                state_targets: vec![vec![0.0]],
                terminal_weight: z,
                terminal_target: vec![0.0],
            },
        }
    };
    Scenario {
        version: SCHEMA_VERSION,
        name: "chain".into(),
        seed: 0,
        horizon: 1,
        step_hours: 1.0,
        band: VoltageBand {
            v_min: 0.95,
            v_max: 1.05,
        },
        epsilon: 1e-3,
        flags: TradingRules::default(),
        constrained_nodes: Some(vec![2]),
        feeder,
        prosumers: vec![prosumer(60.0), prosumer(80.0)],
    }
}

/// Sizing objective `−Σ p_i / base + ε Σ (w − ν/N)²` of a share matrix, with
/// each prosumer's largest admissible injection found by scanning its
/// reactive range (endpoints, zero and a 1e-2 grid).
pub fn doe_objective(cs: &ConstraintSet, s: &Scenario, t: usize, share: &DMatrix<f64>) -> f64 {
    let base = cs.base_power_kva();
    let n = cs.num_prosumers();
    let nu = cs.bound(t);
    let mut obj = 0.0;
    for (i, p) in s.prosumers.iter().enumerate() {
        let p_lo = p.p_lower.max(0.0);
        let mut q_grid: Vec<f64> = (0..=100)
            .map(|k| p.q_lower + (p.q_upper - p.q_lower) * k as f64 / 100.0)
            .collect();
        q_grid.push(0.0_f64.clamp(p.q_lower, p.q_upper));
        let mut best = f64::NEG_INFINITY;
        for q in q_grid {
            // Interval of p satisfying every row at this q.
            let (mut lo, mut hi) = (p_lo, p.p_upper);
            for r in 0..cs.num_rows() {
                let (cp, cq) = cs.coefficient_per_kw(r, i);
                let room = share[(r, i)] - cq * q;
                if cp > 0.0 {
                    hi = hi.min(room / cp);
                } else if cp < 0.0 {
                    lo = lo.max(room / cp);
                } else if room < 0.0 {
                    hi = f64::NEG_INFINITY;
                }
            }
            if lo <= hi {
                best = best.max(hi);
            }
        }
        obj -= best / base;
    }
    let eps = s.epsilon;
    for r in 0..cs.num_rows() {
        for i in 0..n {
            obj += eps * (share[(r, i)] - nu[r] / n as f64).powi(2);
        }
    }
    obj
}

/// Grid search over the two-row, two-prosumer simplex: each row's bound is
/// split as `(s ν, (1 − s) ν)` with `s` on a 1e-3 grid.
pub fn doe_simplex_search(cs: &ConstraintSet, s: &Scenario) -> f64 {
    assert_eq!((cs.num_rows(), cs.num_prosumers()), (2, 2));
    let nu = cs.bound(0);
    let mut best = f64::INFINITY;
    for a in 0..=1000 {
        for b in 0..=1000 {
            let (sa, sb) = (a as f64 / 1000.0, b as f64 / 1000.0);
            let share = DMatrix::from_row_slice(
                2,
                2,
                &[
                    sa * nu[0],
                    (1.0 - sa) * nu[0],
                    sb * nu[1],
                    (1.0 - sb) * nu[1],
                ],
            );
            best = best.min(doe_objective(cs, s, 0, &share));
        }
    }
    best
}

pub fn allocation_objective(cs: &ConstraintSet, s: &Scenario, alloc: &DoeAllocation) -> f64 {
    doe_objective(cs, s, 0, alloc.step(0))
}
