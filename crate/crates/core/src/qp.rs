//! Dense strictly convex quadratic programs.
//!
//! ```text
//!     minimize    1/2 x' G x + a' x
//!     subject to  n_i' x  = b_i   (equality rows)
//!                 n_i' x >= b_i   (inequality rows)
//! ```
//!
//! Solved with the Goldfarb-Idnani dual active-set method: start from the
//! unconstrained minimum and add violated constraints one at a time, keeping
//! dual feasibility, dropping constraints whose multiplier would turn
//! negative. The factorization `J = L^-T Q` is updated with Givens rotations.
//!
//! [`polish`] re-solves the equality-constrained KKT system of a given active
//! set, which lets a caller remove a small regularization from `G` once the
//! active set is known.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Eq,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub coeffs: Vec<f64>,
    pub rhs: f64,
    pub kind: RowKind,
}

impl Row {
    pub fn ge(coeffs: Vec<f64>, rhs: f64) -> Self {
        Self {
            coeffs,
            rhs,
            kind: RowKind::Ge,
        }
    }

    pub fn eq(coeffs: Vec<f64>, rhs: f64) -> Self {
        Self {
            coeffs,
            rhs,
            kind: RowKind::Eq,
        }
    }

    /// `n' x - b`; non-negative when an inequality row is satisfied.
    pub fn slack(&self, x: &[f64]) -> f64 {
        dot(&self.coeffs, x) - self.rhs
    }

    fn normalized(&self) -> (Row, f64) {
        let norm = dot(&self.coeffs, &self.coeffs).sqrt();
        let scale = if norm > 0.0 { 1.0 / norm } else { 1.0 };
        (
            Row {
                coeffs: self.coeffs.iter().map(|c| c * scale).collect(),
                rhs: self.rhs * scale,
                kind: self.kind,
            },
            scale,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    /// Row-major `n x n`, symmetric positive definite.
    pub hessian: Vec<f64>,
    pub linear: Vec<f64>,
    pub rows: Vec<Row>,
}

impl QpProblem {
    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let n = self.dim();
        let mut quad = 0.0;
        for i in 0..n {
            let gi = &self.hessian[i * n..(i + 1) * n];
            quad += x[i] * dot(gi, x);
        }
        0.5 * quad + dot(&self.linear, x)
    }

    /// Largest violation over all rows (0 when feasible).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.rows
            .iter()
            .map(|r| {
                let s = r.slack(x);
                match r.kind {
                    RowKind::Eq => s.abs(),
                    RowKind::Ge => (-s).max(0.0),
                }
            })
            .fold(0.0, f64::max)
    }

    /// Infinity norm of `G x + a - sum_i u_i n_i`.
    pub fn stationarity_residual(&self, x: &[f64], multipliers: &[f64]) -> f64 {
        let n = self.dim();
        let mut g: Vec<f64> = (0..n)
            .map(|i| dot(&self.hessian[i * n..(i + 1) * n], x) + self.linear[i])
            .collect();
        for (row, &u) in self.rows.iter().zip(multipliers) {
            if u != 0.0 {
                axpy(-u, &row.coeffs, &mut g);
            }
        }
        g.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    /// Violation (in row-normalized units) above which a row is added.
    pub feas_tol: f64,
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            feas_tol: 1e-10,
            max_iter: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// One multiplier per row of the original problem, zero when inactive.
    pub multipliers: Vec<f64>,
    /// Indices of the rows in the final active set.
    pub active: Vec<usize>,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QpError {
    NotPositiveDefinite,
    /// Adding this row is impossible without violating the active ones.
    Infeasible {
        row: usize,
    },
    MaxIterations {
        iterations: usize,
        x: Vec<f64>,
    },
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Lower Cholesky factor, row-major.
fn cholesky(g: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = g[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Givens rotation `(c, s, h)` with `c a + s b = h`, `-s a + c b = 0`.
fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / h, b / h, h)
    }
}

/// Column-major square matrix helper for `J`.
struct Basis {
    n: usize,
    cols: Vec<Vec<f64>>,
}

impl Basis {
    fn rotate(&mut self, i: usize, k: usize, c: f64, s: f64) {
        let (lo, hi) = self.cols.split_at_mut(k);
        let a = &mut lo[i];
        let b = &mut hi[0];
        for r in 0..self.n {
            let (x, y) = (a[r], b[r]);
            a[r] = c * x + s * y;
            b[r] = -s * x + c * y;
        }
    }

    fn transpose_mul(&self, v: &[f64]) -> Vec<f64> {
        self.cols.iter().map(|c| dot(c, v)).collect()
    }
}

pub fn solve(problem: &QpProblem, opts: &QpOptions) -> Result<QpSolution, QpError> {
    let n = problem.dim();
    let rows: Vec<(Row, f64)> = problem.rows.iter().map(Row::normalized).collect();
    let m = rows.len();

    let l = cholesky(&problem.hessian, n).ok_or(QpError::NotPositiveDefinite)?;

    // J = L^-T: column k of J is row k of L^-1.
    let mut linv = vec![0.0; n * n];
    for col in 0..n {
        for i in 0..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[i * n + k] * linv[k * n + col];
            }
            linv[i * n + col] = s / l[i * n + i];
        }
    }
    let mut basis = Basis {
        n,
        cols: (0..n).map(|k| linv[k * n..(k + 1) * n].to_vec()).collect(),
    };

    // unconstrained minimum: x = -J J' a
    let jt_a = basis.transpose_mul(&problem.linear);
    let mut x = vec![0.0; n];
    for (k, c) in basis.cols.iter().enumerate() {
        axpy(-jt_a[k], c, &mut x);
    }

    let mut r_mat: Vec<Vec<f64>> = Vec::new(); // r_mat[col][row], upper triangular
    let mut active: Vec<usize> = Vec::new();
    let mut sign: Vec<f64> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut in_active = vec![false; m];
    let mut redundant = vec![false; m];
    let mut iterations = 0usize;

    let slack = |x: &[f64], p: usize| rows[p].0.slack(x);

    loop {
        // step 1: pick a row to add
        let mut pick: Option<(usize, f64)> = None;
        for (p, (row, _)) in rows.iter().enumerate() {
            if row.kind == RowKind::Eq && !in_active[p] && !redundant[p] {
                let s = slack(&x, p);
                pick = Some((p, if s > 0.0 { -1.0 } else { 1.0 }));
                break;
            }
        }
        if pick.is_none() {
            let mut worst = -opts.feas_tol;
            for (p, (row, _)) in rows.iter().enumerate() {
                if row.kind == RowKind::Ge && !in_active[p] {
                    let s = slack(&x, p);
                    if s < worst {
                        worst = s;
                        pick = Some((p, 1.0));
                    }
                }
            }
        }
        let Some((p, sg)) = pick else { break };
        let np: Vec<f64> = rows[p].0.coeffs.iter().map(|c| sg * c).collect();
        let mut sp = sg * slack(&x, p);
        let mut u_plus = u.clone();
        u_plus.push(0.0);

        loop {
            iterations += 1;
            if iterations > opts.max_iter {
                return Err(QpError::MaxIterations { iterations, x });
            }
            let q = active.len();
            let d = basis.transpose_mul(&np);
            let mut z = vec![0.0; n];
            for k in q..n {
                axpy(d[k], &basis.cols[k], &mut z);
            }
            // r = R^-1 d[..q]
            let mut r = d[..q].to_vec();
            for k in (0..q).rev() {
                r[k] /= r_mat[k][k];
                for i in 0..k {
                    r[i] -= r[k] * r_mat[k][i];
                }
            }
            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for j in 0..q {
                if rows[active[j]].0.kind == RowKind::Ge && r[j] > 0.0 {
                    let ratio = u_plus[j] / r[j];
                    if ratio < t1 {
                        t1 = ratio;
                        drop_at = Some(j);
                    }
                }
            }
            let zn = dot(&z, &np);
            let znorm = dot(&z, &z).sqrt();
            let t2 = if znorm <= 1e-14 || zn <= 1e-300 {
                f64::INFINITY
            } else {
                -sp / zn
            };
            let t = t1.min(t2);
            if t.is_infinite() {
                if rows[p].0.kind == RowKind::Eq && sp.abs() <= opts.feas_tol {
                    redundant[p] = true;
                    break;
                }
                return Err(QpError::Infeasible { row: p });
            }
            for j in 0..q {
                u_plus[j] -= t * r[j];
            }
            u_plus[q] += t;
            if t2.is_infinite() {
                // dual step only
                let l = drop_at.expect("finite partial step has a drop index");
                drop_constraint(l, &mut basis, &mut r_mat, &mut active, &mut sign, &mut in_active);
                u_plus.remove(l);
                continue;
            }
            axpy(t, &z, &mut x);
            if t2 <= t1 {
                // full step: add p
                let mut d = d;
                for i in (q + 1..n).rev() {
                    if d[i] != 0.0 {
                        let (c, s, h) = givens(d[i - 1], d[i]);
                        d[i - 1] = h;
                        d[i] = 0.0;
                        basis.rotate(i - 1, i, c, s);
                    }
                }
                r_mat.push(d[..=q].to_vec());
                active.push(p);
                sign.push(sg);
                in_active[p] = true;
                u = u_plus;
                break;
            }
            let l = drop_at.expect("partial step has a drop index");
            drop_constraint(l, &mut basis, &mut r_mat, &mut active, &mut sign, &mut in_active);
            u_plus.remove(l);
            sp = sg * slack(&x, p);
        }
    }

    let mut multipliers = vec![0.0; m];
    for ((&row, &s), &ui) in active.iter().zip(&sign).zip(&u) {
        // undo the row normalization
        multipliers[row] = s * ui * rows[row].1;
    }
    let objective = problem.objective(&x);
    Ok(QpSolution {
        x,
        multipliers,
        active,
        objective,
        iterations,
    })
}

fn drop_constraint(
    l: usize,
    basis: &mut Basis,
    r_mat: &mut Vec<Vec<f64>>,
    active: &mut Vec<usize>,
    sign: &mut Vec<f64>,
    in_active: &mut [bool],
) {
    let q = active.len();
    in_active[active[l]] = false;
    active.remove(l);
    sign.remove(l);
    r_mat.remove(l);
    // columns l..q-1 are now upper Hessenberg; restore triangularity
    for k in l..q - 1 {
        let a = r_mat[k][k];
        let b = r_mat[k].get(k + 1).copied().unwrap_or(0.0);
        if b == 0.0 {
            r_mat[k].truncate(k + 1);
            continue;
        }
        let (c, s, h) = givens(a, b);
        r_mat[k][k] = h;
        r_mat[k].truncate(k + 1);
        for col in r_mat.iter_mut().skip(k + 1) {
            let (x, y) = (col[k], col[k + 1]);
            col[k] = c * x + s * y;
            col[k + 1] = -s * x + c * y;
        }
        basis.rotate(k, k + 1, c, s);
    }
}

/// Solves the KKT system of `problem` with the given rows held as
/// equalities. Returns the point and per-row multipliers (zero outside
/// `active`), or `None` when the system is singular.
pub fn polish(problem: &QpProblem, active: &[usize]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = problem.dim();
    let k = active.len();
    let mut kkt = DMatrix::<f64>::zeros(n + k, n + k);
    let mut rhs = DVector::<f64>::zeros(n + k);
    for i in 0..n {
        for j in 0..n {
            kkt[(i, j)] = problem.hessian[i * n + j];
        }
        rhs[i] = -problem.linear[i];
    }
    for (c, &row) in active.iter().enumerate() {
        let r = &problem.rows[row];
        for j in 0..n {
            kkt[(n + c, j)] = r.coeffs[j];
            kkt[(j, n + c)] = -r.coeffs[j];
        }
        rhs[n + c] = r.rhs;
    }
    let sol = kkt.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = sol.rows(0, n).iter().copied().collect();
    let mut mult = vec![0.0; problem.rows.len()];
    for (c, &row) in active.iter().enumerate() {
        mult[row] = sol[n + c];
    }
    Some((x, mult))
}
