//! Interior-point solve followed by an active-set polish.
//!
//! The interior-point stage (Clarabel) locates the optimal face; the polish
//! stage re-solves the equality-constrained KKT system on that face with an
//! LDLᵀ factorization and iterative refinement, which drives the residuals of
//! the multipliers down to round-off. Constraints whose multipliers come out
//! with the wrong sign are released and violated ones are added until the
//! face settles. The polished point is kept only when it scores strictly
//! better than the interior point.

use clarabel::algebra::CscMatrix;
use clarabel::qdldl::{QDLDLFactorisation, QDLDLSettingsBuilder};
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

use super::kkt::residuals;
use super::{
    KktResiduals, PrimalDualSolution, QpError, QuadraticProgram, SolveStatus, SolverConfig,
    SparseMatrix,
};

const REFINE_STEPS: usize = 30;
const POLISH_ROUNDS: usize = 40;
/// Relative violation tolerated before a constraint blocks a polish step.
const FEAS_MARGIN: f64 = 1e-13;
/// Step lengths closer than this block together.
const STEP_TIE: f64 = 1e-12;

/// Where each clarabel row came from.
#[derive(Clone, Copy)]
enum RowKind {
    Eq(usize),
    Fixed(usize),
    Ineq(usize),
    Upper(usize),
    Lower(usize),
}

/// Solves `problem`; non-optimal outcomes are reported through `status`.
///
/// Deterministic: the backend runs single-threaded and the polish stage uses
/// a fixed ordering, so identical inputs give bitwise-identical outputs.
pub fn solve_qp(
    problem: &QuadraticProgram,
    config: &SolverConfig,
) -> Result<PrimalDualSolution, QpError> {
    problem.validate()?;
    config.validate()?;
    let first = attempt(problem, config, true)?;
    if first.status != SolveStatus::MaxIter {
        return Ok(first);
    }
    // Ruiz equilibration occasionally stalls the interior point on badly
    // scaled degenerate problems; retry without it.
    let second = attempt(problem, config, false)?;
    if second.status == SolveStatus::Optimal
        || second.kkt_residuals.max() < first.kkt_residuals.max()
    {
        Ok(second)
    } else {
        Ok(first)
    }
}

fn attempt(
    problem: &QuadraticProgram,
    config: &SolverConfig,
    equilibrate: bool,
) -> Result<PrimalDualSolution, QpError> {
    let n = problem.num_variables();

    let mut sol = PrimalDualSolution {
        primal: vec![0.0; n],
        eq_duals: vec![0.0; problem.eq_rhs.len()],
        ineq_duals: vec![0.0; problem.ineq_rhs.len()],
        bound_duals: vec![0.0; n],
        status: SolveStatus::MaxIter,
        kkt_residuals: KktResiduals::default(),
        iterations: 0,
    };
    if problem.ineq_rhs.iter().any(|&b| b == f64::NEG_INFINITY) {
        sol.status = SolveStatus::Infeasible;
        return Ok(sol);
    }

    let (rows, a_trip, b, n_zero) = clarabel_rows(problem);
    let m = rows.len();

    if n > 0 && m + problem.objective_matrix.nnz() > 0 {
        let p_upper: Vec<(usize, usize, f64)> = problem
            .objective_matrix
            .iter()
            .filter(|&(r, c, _)| r <= c)
            .collect();
        let p = to_clarabel(&SparseMatrix::from_triplets(n, n, &p_upper));
        let a = to_clarabel(&SparseMatrix::from_triplets(m, n, &a_trip));
        let mut cones = Vec::new();
        if n_zero > 0 {
            cones.push(SupportedConeT::ZeroConeT(n_zero));
        }
        if m > n_zero {
            cones.push(SupportedConeT::NonnegativeConeT(m - n_zero));
        }
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(config.max_iterations)
            .tol_gap_abs(1e-10)
            .tol_gap_rel(1e-10)
            .tol_feas(1e-10)
            .tol_ktratio(1e-8)
            .equilibrate_enable(equilibrate)
            .build()
            .map_err(|e| QpError::Backend(e.to_string()))?;
        let mut solver =
            DefaultSolver::new(&p, &problem.objective_vector, &a, &b, &cones, settings)
                .map_err(|e| QpError::Backend(format!("{e:?}")))?;
        solver.solve();
        let out = &solver.solution;
        sol.iterations = out.iterations;
        match out.status {
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                sol.status = SolveStatus::Infeasible;
                return Ok(sol);
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                sol.status = SolveStatus::Unbounded;
                return Ok(sol);
            }
            _ => {}
        }
        sol.primal.copy_from_slice(&out.x);
        for (row, kind) in rows.iter().enumerate() {
            let z = out.z[row];
            match *kind {
                RowKind::Eq(k) => sol.eq_duals[k] = z,
                RowKind::Ineq(k) => sol.ineq_duals[k] = z,
                RowKind::Fixed(j) => sol.bound_duals[j] = z,
                RowKind::Upper(j) => sol.bound_duals[j] += z,
                RowKind::Lower(j) => sol.bound_duals[j] -= z,
            }
        }
    } else {
        // Nothing to optimize beyond the box: minimize cᵀx coordinate-wise.
        for j in 0..n {
            let c = problem.objective_vector[j];
            let (lo, hi) = (problem.lower[j], problem.upper[j]);
            sol.primal[j] = if c > 0.0 {
                lo
            } else if c < 0.0 {
                hi
            } else {
                0.0f64.clamp(lo, hi)
            };
            if !sol.primal[j].is_finite() {
                sol.status = SolveStatus::Unbounded;
                return Ok(sol);
            }
            sol.bound_duals[j] = -c;
        }
    }

    let mut best = residuals(problem, &sol);
    if best.max() > 0.0 {
        if let Some((polished, res)) = polish(problem, &sol, config) {
            if res.max() < best.max() {
                sol = polished;
                best = res;
            }
        }
    }
    for j in 0..n {
        sol.primal[j] = sol.primal[j].clamp(problem.lower[j], problem.upper[j]);
    }
    // Remove sign noise left on multipliers of inactive rows.
    for pi in sol.ineq_duals.iter_mut() {
        if *pi < 0.0 {
            *pi = 0.0;
        }
    }
    let res = residuals(problem, &sol);
    sol.kkt_residuals = if res.max() <= best.max() { res } else { best };
    sol.status = if sol.kkt_residuals.max() <= config.kkt_tolerance {
        SolveStatus::Optimal
    } else {
        SolveStatus::MaxIter
    };
    Ok(sol)
}

fn clarabel_rows(
    problem: &QuadraticProgram,
) -> (Vec<RowKind>, Vec<(usize, usize, f64)>, Vec<f64>, usize) {
    let n = problem.num_variables();
    let mut rows = Vec::new();
    let mut trip = Vec::new();
    let mut b = Vec::new();

    let eq_rows: Vec<Vec<(usize, f64)>> = rows_of(&problem.eq_matrix);
    for (k, row) in eq_rows.iter().enumerate() {
        let r = rows.len();
        trip.extend(row.iter().map(|&(j, v)| (r, j, v)));
        b.push(problem.eq_rhs[k]);
        rows.push(RowKind::Eq(k));
    }
    for j in 0..n {
        if problem.lower[j] == problem.upper[j] {
            let r = rows.len();
            trip.push((r, j, 1.0));
            b.push(problem.lower[j]);
            rows.push(RowKind::Fixed(j));
        }
    }
    let n_zero = rows.len();

    let in_rows = rows_of(&problem.ineq_matrix);
    for (k, row) in in_rows.iter().enumerate() {
        if problem.ineq_rhs[k] == f64::INFINITY {
            continue;
        }
        let r = rows.len();
        trip.extend(row.iter().map(|&(j, v)| (r, j, v)));
        b.push(problem.ineq_rhs[k]);
        rows.push(RowKind::Ineq(k));
    }
    for j in 0..n {
        let (lo, hi) = (problem.lower[j], problem.upper[j]);
        if lo == hi {
            continue;
        }
        if hi.is_finite() {
            let r = rows.len();
            trip.push((r, j, 1.0));
            b.push(hi);
            rows.push(RowKind::Upper(j));
        }
        if lo.is_finite() {
            let r = rows.len();
            trip.push((r, j, -1.0));
            b.push(-lo);
            rows.push(RowKind::Lower(j));
        }
    }
    (rows, trip, b, n_zero)
}

fn rows_of(m: &SparseMatrix) -> Vec<Vec<(usize, f64)>> {
    let mut out = vec![Vec::new(); m.nrows()];
    for (r, c, v) in m.iter() {
        out[r].push((c, v));
    }
    out
}

fn to_clarabel(m: &SparseMatrix) -> CscMatrix<f64> {
    CscMatrix::new(
        m.nrows(),
        m.ncols(),
        m.colptr().to_vec(),
        m.rowval().to_vec(),
        m.nzval().to_vec(),
    )
}

/// Primal-dual guess carried between polish rounds.
struct FacePoint {
    x: Vec<f64>,
    eq: Vec<f64>,
    ineq: Vec<f64>,
    bound: Vec<f64>,
}

/// Solves the equality-constrained KKT system with the active inequalities
/// and bounds held tight, starting iterative refinement from `guess`.
fn solve_face(
    problem: &QuadraticProgram,
    eq_rows: &[Vec<(usize, f64)>],
    ineq_rows: &[Vec<(usize, f64)>],
    ineq_on: &[bool],
    bound_on: &[Option<f64>],
    guess: &FacePoint,
    delta: f64,
) -> Option<FacePoint> {
    let n = problem.num_variables();
    let mut c_rows: Vec<&[(usize, f64)]> = Vec::new();
    let mut rhs_c = Vec::new();
    let mut y0 = Vec::new();
    let unit: Vec<[(usize, f64); 1]> = (0..n).map(|j| [(j, 1.0)]).collect();
    for (k, row) in eq_rows.iter().enumerate() {
        c_rows.push(row);
        rhs_c.push(problem.eq_rhs[k]);
        y0.push(guess.eq[k]);
    }
    let ineq_idx: Vec<usize> = (0..ineq_rows.len()).filter(|&k| ineq_on[k]).collect();
    for &k in &ineq_idx {
        c_rows.push(&ineq_rows[k]);
        rhs_c.push(problem.ineq_rhs[k]);
        y0.push(guess.ineq[k]);
    }
    let bound_idx: Vec<(usize, f64)> = (0..n).filter_map(|j| bound_on[j].map(|v| (j, v))).collect();
    for &(j, v) in &bound_idx {
        c_rows.push(&unit[j]);
        rhs_c.push(v);
        y0.push(guess.bound[j]);
    }

    let mc = c_rows.len();
    let dim = n + mc;
    let mut trip: Vec<(usize, usize, f64)> = problem
        .objective_matrix
        .iter()
        .filter(|&(r, c, _)| r <= c)
        .collect();
    for j in 0..n {
        trip.push((j, j, delta));
    }
    for (r, row) in c_rows.iter().enumerate() {
        for &(j, v) in row.iter() {
            trip.push((j, n + r, v));
        }
        trip.push((n + r, n + r, -delta));
    }
    let kkt = to_clarabel(&SparseMatrix::from_triplets(dim, dim, &trip));
    let mut signs = vec![1i8; n];
    signs.extend(std::iter::repeat(-1i8).take(mc));
    let settings = QDLDLSettingsBuilder::default().Dsigns(signs).build().ok()?;
    let mut ldl = QDLDLFactorisation::new(&kkt, Some(settings)).ok()?;

    let mut rhs = problem
        .objective_vector
        .iter()
        .map(|c| -c)
        .collect::<Vec<_>>();
    rhs.extend_from_slice(&rhs_c);
    let rhs_scale = 1.0 + rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let unreg = |s: &[f64]| -> Vec<f64> {
        let (xs, ys) = s.split_at(n);
        let mut top = problem.objective_matrix.mul_vec(xs);
        for (r, row) in c_rows.iter().enumerate() {
            for &(j, v) in row.iter() {
                top[j] += v * ys[r];
            }
        }
        let bottom = c_rows
            .iter()
            .map(|row| row.iter().map(|&(j, v)| v * xs[j]).sum::<f64>());
        top.extend(bottom);
        top
    };

    let mut s: Vec<f64> = guess.x.clone();
    s.extend_from_slice(&y0);
    let mut last = f64::INFINITY;
    for _ in 0..REFINE_STEPS {
        let ks = unreg(&s);
        let mut r: Vec<f64> = rhs.iter().zip(&ks).map(|(a, b)| a - b).collect();
        let norm = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !norm.is_finite() {
            return None;
        }
        if norm <= 1e-15 * rhs_scale || norm >= last {
            break;
        }
        last = norm;
        ldl.solve(&mut r);
        for (si, di) in s.iter_mut().zip(&r) {
            *si += di;
        }
    }
    if s.iter().any(|v| !v.is_finite()) {
        return None;
    }

    let neq = eq_rows.len();
    let mut out = FacePoint {
        x: s[..n].to_vec(),
        eq: s[n..n + neq].to_vec(),
        ineq: vec![0.0; ineq_rows.len()],
        bound: vec![0.0; n],
    };
    for (r, &k) in ineq_idx.iter().enumerate() {
        out.ineq[k] = s[n + neq + r];
    }
    for (r, &(j, _)) in bound_idx.iter().enumerate() {
        out.bound[j] = s[n + neq + ineq_idx.len() + r];
    }
    Some(out)
}

/// Clips a face solution to a sign-correct candidate and scores it.
fn candidate(
    problem: &QuadraticProgram,
    base: &PrimalDualSolution,
    f: &FacePoint,
    bound_on: &[Option<f64>],
) -> (PrimalDualSolution, KktResiduals) {
    let mut out = base.clone();
    for j in 0..f.x.len() {
        // Inactive variables can drift across a bound by round-off.
        out.primal[j] = f.x[j].clamp(problem.lower[j], problem.upper[j]);
        out.bound_duals[j] = match bound_on[j] {
            None => 0.0,
            Some(_) if problem.lower[j] == problem.upper[j] => f.bound[j],
            Some(v) if v == problem.upper[j] => f.bound[j].max(0.0),
            Some(_) => f.bound[j].min(0.0),
        };
    }
    out.eq_duals.copy_from_slice(&f.eq);
    for (o, &y) in out.ineq_duals.iter_mut().zip(&f.ineq) {
        *o = y.max(0.0);
    }
    let res = residuals(problem, &out);
    (out, res)
}

/// Active-set refinement of the interior-point solution. The optimal face is
/// guessed from `sol`; each round solves the KKT system on the current face
/// and moves toward its solution. A step that would cross an inactive
/// constraint stops there and adds the constraint; a full step releases the
/// constraints whose multipliers come out with the wrong sign.
fn polish(
    problem: &QuadraticProgram,
    sol: &PrimalDualSolution,
    config: &SolverConfig,
) -> Option<(PrimalDualSolution, KktResiduals)> {
    let n = problem.num_variables();
    let delta = config.regularization_floor.max(1e-12);
    let eq_rows = rows_of(&problem.eq_matrix);
    let ineq_rows = rows_of(&problem.ineq_matrix);
    let x: Vec<f64> = (0..n)
        .map(|j| sol.primal[j].clamp(problem.lower[j], problem.upper[j]))
        .collect();

    let gx = problem.ineq_matrix.mul_vec(&x);
    let mut ineq_on: Vec<bool> = (0..ineq_rows.len())
        .map(|k| {
            let b = problem.ineq_rhs[k];
            b.is_finite() && sol.ineq_duals[k] > (b - gx[k]).max(0.0)
        })
        .collect();
    let mut bound_on: Vec<Option<f64>> = (0..n)
        .map(|j| {
            let (lo, hi, z) = (problem.lower[j], problem.upper[j], sol.bound_duals[j]);
            if lo == hi {
                Some(lo)
            } else if z > 0.0 && z > (hi - x[j]).max(0.0) {
                Some(hi)
            } else if z < 0.0 && -z > (x[j] - lo).max(0.0) {
                Some(lo)
            } else {
                None
            }
        })
        .collect();
    let mut point = FacePoint {
        x,
        eq: sol.eq_duals.clone(),
        ineq: sol.ineq_duals.clone(),
        bound: sol.bound_duals.clone(),
    };

    let mut best: Option<(PrimalDualSolution, KktResiduals)> = None;
    for _ in 0..POLISH_ROUNDS {
        let Some(face) = solve_face(
            problem, &eq_rows, &ineq_rows, &ineq_on, &bound_on, &point, delta,
        ) else {
            break;
        };
        let (cand, res) = candidate(problem, sol, &face, &bound_on);
        if best.as_ref().is_none_or(|(_, b)| res.max() < b.max()) {
            best = Some((cand, res));
        }
        if res.max() <= config.kkt_tolerance {
            break;
        }

        // Ratio test along x → face.x against the inactive constraints.
        let dir: Vec<f64> = face.x.iter().zip(&point.x).map(|(a, b)| a - b).collect();
        let g0 = problem.ineq_matrix.mul_vec(&point.x);
        let gd = problem.ineq_matrix.mul_vec(&dir);
        let mut alpha = 1.0f64;
        let mut blockers: Vec<Blocker> = Vec::new();
        let mut consider = |a: f64, who: Blocker| {
            let a = a.max(0.0);
            if a < alpha - STEP_TIE {
                alpha = a;
                blockers.clear();
                blockers.push(who);
            } else if a <= alpha + STEP_TIE {
                blockers.push(who);
            }
        };
        for k in 0..ineq_rows.len() {
            let b = problem.ineq_rhs[k];
            if ineq_on[k] || !b.is_finite() || gd[k] <= 0.0 {
                continue;
            }
            if g0[k] + gd[k] > b + FEAS_MARGIN * (1.0 + b.abs()) {
                consider((b - g0[k]) / gd[k], Blocker::Ineq(k));
            }
        }
        for j in 0..n {
            if bound_on[j].is_some() {
                continue;
            }
            let (lo, hi) = (problem.lower[j], problem.upper[j]);
            if face.x[j] > hi + FEAS_MARGIN * (1.0 + hi.abs()) {
                consider((hi - point.x[j]) / dir[j], Blocker::Bound(j, hi));
            } else if face.x[j] < lo - FEAS_MARGIN * (1.0 + lo.abs()) {
                consider((lo - point.x[j]) / dir[j], Blocker::Bound(j, lo));
            }
        }

        if !blockers.is_empty() {
            for b in blockers {
                match b {
                    Blocker::Ineq(k) => ineq_on[k] = true,
                    Blocker::Bound(j, v) => bound_on[j] = Some(v),
                }
            }
            for (xi, di) in point.x.iter_mut().zip(&dir) {
                *xi += alpha * di;
            }
            point.eq = face.eq;
            point.ineq = face.ineq;
            point.bound = face.bound;
            continue;
        }

        let dual_tol = 1e-13
            * (1.0
                + face
                    .ineq
                    .iter()
                    .chain(&face.bound)
                    .fold(0.0f64, |m, v| m.max(v.abs())));
        let mut changed = false;
        for k in 0..ineq_rows.len() {
            if ineq_on[k] && face.ineq[k] < -dual_tol {
                ineq_on[k] = false;
                changed = true;
            }
        }
        for j in 0..n {
            let (lo, hi) = (problem.lower[j], problem.upper[j]);
            if lo == hi {
                continue;
            }
            let y = face.bound[j];
            if let Some(v) = bound_on[j] {
                if (v == hi && y < -dual_tol) || (v == lo && y > dual_tol) {
                    bound_on[j] = None;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
        point = face;
    }
    best
}

enum Blocker {
    Ineq(usize),
    Bound(usize, f64),
}
