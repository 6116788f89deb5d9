//! Dense convex QP solver.
//!
//! Solves
//!
//! ```text
//! min ½ xᵀHx + fᵀx   s.t.  A x ≤ b,  lb ≤ x ≤ ub
//! ```
//!
//! with a primal active-set method. Active bounds fix their variable, so the
//! equality-constrained subproblem only involves free variables and the
//! working set of general rows. Subproblems are solved in the null space of
//! the working rows with a Cholesky factorization of the reduced Hessian.
//! Infeasible starting points go through an elastic phase one first.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

impl QpProblem {
    /// Box-constrained problem with no general rows.
    pub fn boxed(h: DMatrix<f64>, f: DVector<f64>, lb: DVector<f64>, ub: DVector<f64>) -> Self {
        let n = f.len();
        QpProblem {
            h,
            f,
            a_ineq: DMatrix::zeros(0, n),
            b_ineq: DVector::zeros(0),
            lb,
            ub,
        }
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.f.dot(x)
    }

    /// Largest constraint violation at `x` (0 when feasible).
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        let rows = (&self.a_ineq * x - &self.b_ineq).fold(0.0, |m, v| f64::max(m, v));
        let lo = (&self.lb - x).fold(0.0, |m, v| f64::max(m, v));
        let hi = (x - &self.ub).fold(0.0, |m, v| f64::max(m, v));
        rows.max(lo).max(hi)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(Error::InvalidInput(format!(
                "H is {}x{}, expected {n}x{n}",
                self.h.nrows(),
                self.h.ncols()
            )));
        }
        if self.a_ineq.ncols() != n || self.a_ineq.nrows() != self.b_ineq.len() {
            return Err(Error::InvalidInput("inequality dimensions mismatch".into()));
        }
        if self.lb.len() != n || self.ub.len() != n {
            return Err(Error::InvalidInput("bound dimensions mismatch".into()));
        }
        if self.lb.iter().zip(self.ub.iter()).any(|(l, u)| l > u || l.is_nan() || u.is_nan()) {
            return Err(Error::InvalidInput("lower bound exceeds upper bound".into()));
        }
        let scale = 1.0 + self.h.amax();
        for i in 0..n {
            for j in 0..i {
                if (self.h[(i, j)] - self.h[(j, i)]).abs() > 1e-10 * scale {
                    return Err(Error::InvalidInput(format!("H is not symmetric at ({i}, {j})")));
                }
            }
        }
        let finite = self.h.iter().chain(self.f.iter()).chain(self.a_ineq.iter()).chain(self.b_ineq.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("non-finite problem data".into()));
        }
        Ok(())
    }

    /// Plain-text dump for offline cross-checking: each matrix is written as
    /// `name rows cols` followed by one whitespace-separated line per row.
    pub fn dump_text(&self) -> String {
        fn mat(out: &mut String, name: &str, m: &DMatrix<f64>) {
            out.push_str(&format!("{name} {} {}\n", m.nrows(), m.ncols()));
            for r in 0..m.nrows() {
                let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:e}", m[(r, c)])).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        let col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        let mut out = String::new();
        mat(&mut out, "H", &self.h);
        mat(&mut out, "f", &col(&self.f));
        mat(&mut out, "Aineq", &self.a_ineq);
        mat(&mut out, "bineq", &col(&self.b_ineq));
        mat(&mut out, "lb", &col(&self.lb));
        mat(&mut out, "ub", &col(&self.ub));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    NumericalFailure,
    Infeasible,
}

impl QpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::MaxIterations => "max_iterations",
            QpStatus::NumericalFailure => "numerical_failure",
            QpStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpResult {
    pub x: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Multipliers of the general rows (zero for inactive rows).
    pub lambda: DVector<f64>,
    /// Multipliers of the lower bounds.
    pub mu_lower: DVector<f64>,
    /// Multipliers of the upper bounds.
    pub mu_upper: DVector<f64>,
}

impl QpResult {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

pub fn solve_qp(p: &QpProblem, opts: &QpOptions) -> Result<QpResult> {
    solve_qp_from(p, None, opts)
}

/// Like [`solve_qp`], starting from `start` when it is feasible.
pub fn solve_qp_from(
    p: &QpProblem,
    start: Option<&DVector<f64>>,
    opts: &QpOptions,
) -> Result<QpResult> {
    p.validate()?;
    let n = p.dim();
    let mut x = match start {
        Some(s) if s.len() == n => s.clone(),
        Some(s) => {
            return Err(Error::InvalidInput(format!(
                "start has length {}, expected {n}",
                s.len()
            )))
        }
        None => DVector::zeros(n),
    };
    for j in 0..n {
        x[j] = x[j].clamp(p.lb[j], p.ub[j]);
    }

    let mut phase_one_iters = 0;
    if p.violation(&x) > feas_tol(p) {
        match phase_one(p, &x, opts)? {
            Some((xf, it)) => {
                x = xf;
                phase_one_iters = it;
            }
            None => {
                let mut r = finish(p, x, 0, QpStatus::Infeasible, None);
                r.iterations = opts.max_iter;
                return Ok(r);
            }
        }
    }
    let mut r = ActiveSet::new(p, x, opts).run();
    r.iterations += phase_one_iters;
    Ok(r)
}

fn feas_tol(p: &QpProblem) -> f64 {
    1e-9 * (1.0 + p.b_ineq.amax())
}

/// Minimizes the total row violation with one elastic variable per row and
/// a small proximal term.
fn phase_one(
    p: &QpProblem,
    x0: &DVector<f64>,
    opts: &QpOptions,
) -> Result<Option<(DVector<f64>, usize)>> {
    const PROX: f64 = 1e-8;
    let n = p.dim();
    let m = p.b_ineq.len();
    let mut h = DMatrix::zeros(n + m, n + m);
    h.fill_diagonal(PROX);
    let mut f = DVector::from_element(n + m, 1.0);
    for j in 0..n {
        f[j] = -PROX * x0[j];
    }
    let mut a = DMatrix::zeros(m, n + m);
    a.view_mut((0, 0), (m, n)).copy_from(&p.a_ineq);
    for i in 0..m {
        a[(i, n + i)] = -1.0;
    }
    let lb = DVector::from_fn(n + m, |j, _| if j < n { p.lb[j] } else { 0.0 });
    let ub = DVector::from_fn(n + m, |j, _| if j < n { p.ub[j] } else { f64::INFINITY });
    let aux = QpProblem {
        h,
        f,
        a_ineq: a,
        b_ineq: p.b_ineq.clone(),
        lb,
        ub,
    };
    let viol = &p.a_ineq * x0 - &p.b_ineq;
    let start = DVector::from_fn(n + m, |j, _| if j < n { x0[j] } else { viol[j - n].max(0.0) });
    let r = ActiveSet::new(&aux, start, opts).run();
    let xf = r.x.rows(0, n).into_owned();
    if p.violation(&xf) > feas_tol(p) {
        return Ok(None);
    }
    Ok(Some((xf, r.iterations)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bound {
    Free,
    Lower,
    Upper,
    Fixed,
}

struct Subproblem {
    step: DVector<f64>,
    /// Multipliers aligned with `ActiveSet::work`.
    lambda: Vec<f64>,
}

struct ActiveSet<'a> {
    p: &'a QpProblem,
    opts: &'a QpOptions,
    x: DVector<f64>,
    bounds: Vec<Bound>,
    work: Vec<usize>,
    row_norms: Vec<f64>,
}

impl<'a> ActiveSet<'a> {
    fn new(p: &'a QpProblem, x: DVector<f64>, opts: &'a QpOptions) -> Self {
        let bounds = (0..p.dim())
            .map(|j| {
                if p.lb[j] == p.ub[j] {
                    Bound::Fixed
                } else if x[j] <= p.lb[j] {
                    Bound::Lower
                } else if x[j] >= p.ub[j] {
                    Bound::Upper
                } else {
                    Bound::Free
                }
            })
            .collect();
        let row_norms = (0..p.a_ineq.nrows()).map(|i| p.a_ineq.row(i).norm()).collect();
        ActiveSet {
            p,
            opts,
            x,
            bounds,
            work: Vec::new(),
            row_norms,
        }
    }

    fn free(&self) -> Vec<usize> {
        (0..self.p.dim()).filter(|&j| self.bounds[j] == Bound::Free).collect()
    }

    fn run(mut self) -> QpResult {
        let p = self.p;
        let mut at_subproblem_min = false;
        let mut iterations = 0;
        loop {
            if iterations >= self.opts.max_iter {
                return finish(p, self.x, iterations, QpStatus::MaxIterations, None);
            }
            iterations += 1;
            let g = &p.h * &self.x + &p.f;
            let free = self.free();
            let Some(sub) = self.subproblem(&free, &g) else {
                return finish(p, self.x, iterations, QpStatus::NumericalFailure, None);
            };
            let step_norm = sub.step.amax();
            if at_subproblem_min || step_norm <= 1e-13 * (1.0 + self.x.amax()) {
                at_subproblem_min = false;
                let (lambda, mu_lo, mu_hi) = self.multipliers(&g, &sub);
                let scale = self.opts.tol * (1.0 + g.amax());
                // most negative multiplier among removable constraints
                let mut worst: Option<(f64, Release)> = None;
                for (k, &l) in sub.lambda.iter().enumerate() {
                    if l < -scale && worst.is_none_or(|(w, _)| l < w) {
                        worst = Some((l, Release::Row(k)));
                    }
                }
                for j in 0..p.dim() {
                    let m = match self.bounds[j] {
                        Bound::Lower => mu_lo[j],
                        Bound::Upper => mu_hi[j],
                        _ => continue,
                    };
                    if m < -scale && worst.is_none_or(|(w, _)| m < w) {
                        worst = Some((m, Release::Var(j)));
                    }
                }
                match worst {
                    None => {
                        return finish(
                            p,
                            self.x,
                            iterations,
                            QpStatus::Optimal,
                            Some((lambda, mu_lo, mu_hi)),
                        )
                    }
                    Some((_, Release::Row(k))) => {
                        self.work.remove(k);
                    }
                    Some((_, Release::Var(j))) => self.bounds[j] = Bound::Free,
                }
                continue;
            }

            // ratio test along the step
            let dir = &sub.step;
            let mut alpha = 1.0;
            let mut block = None;
            for &j in &free {
                let d = dir[j];
                if d > 0.0 && p.ub[j].is_finite() {
                    let a = ((p.ub[j] - self.x[j]) / d).max(0.0);
                    if a < alpha {
                        alpha = a;
                        block = Some(Blocking::Upper(j));
                    }
                } else if d < 0.0 && p.lb[j].is_finite() {
                    let a = ((p.lb[j] - self.x[j]) / d).max(0.0);
                    if a < alpha {
                        alpha = a;
                        block = Some(Blocking::Lower(j));
                    }
                }
            }
            for i in 0..p.a_ineq.nrows() {
                if self.work.contains(&i) {
                    continue;
                }
                let row = p.a_ineq.row(i);
                let ad: f64 = free.iter().map(|&j| row[j] * dir[j]).sum();
                if ad <= 1e-12 * self.row_norms[i] * step_norm {
                    continue;
                }
                let slack = p.b_ineq[i] - row.dot(&self.x.transpose());
                let a = (slack / ad).max(0.0);
                if a < alpha {
                    alpha = a;
                    block = Some(Blocking::Row(i));
                }
            }
            self.x.axpy(alpha, dir, 1.0);
            match block {
                Some(Blocking::Upper(j)) => {
                    self.x[j] = p.ub[j];
                    self.bounds[j] = Bound::Upper;
                }
                Some(Blocking::Lower(j)) => {
                    self.x[j] = p.lb[j];
                    self.bounds[j] = Bound::Lower;
                }
                Some(Blocking::Row(i)) => self.work.push(i),
                None => at_subproblem_min = true,
            }
        }
    }

    /// Solves the equality-constrained subproblem over the free variables.
    /// Returns `None` when the reduced Hessian is indefinite.
    fn subproblem(&mut self, free: &[usize], g: &DVector<f64>) -> Option<Subproblem> {
        let p = self.p;
        let n = p.dim();
        let nf = free.len();
        let mut step = DVector::zeros(n);
        if nf == 0 {
            self.work.clear();
            return Some(Subproblem {
                step,
                lambda: Vec::new(),
            });
        }
        let g_f = DVector::from_fn(nf, |k, _| g[free[k]]);
        let h_ff = DMatrix::from_fn(nf, nf, |r, c| p.h[(free[r], free[c])]);

        // Drop working rows that became dependent over the free variables.
        let (q_t, r_mat) = loop {
            let k = self.work.len();
            if k == 0 {
                break (DMatrix::identity(nf, nf), DMatrix::zeros(0, 0));
            }
            let at = DMatrix::from_fn(nf, k, |r, c| p.a_ineq[(self.work[c], free[r])]);
            if k > nf {
                self.work.truncate(nf);
                continue;
            }
            let qr = at.clone().qr();
            let r = qr.r();
            let dep = (0..k).find(|&i| r[(i, i)].abs() <= 1e-10 * (1.0 + at.column(i).norm()));
            if let Some(i) = dep {
                self.work.remove(i);
                continue;
            }
            let mut q_t = DMatrix::identity(nf, nf);
            qr.q_tr_mul(&mut q_t);
            break (q_t, r);
        };
        let k = self.work.len();

        let z = q_t.rows(k, nf - k).transpose();
        if nf > k {
            let zg = z.tr_mul(&g_f);
            let hr = z.tr_mul(&(&h_ff * &z));
            let chol = match hr.clone().cholesky() {
                Some(c) => c,
                None => {
                    let shift = 1e-12 * (1.0 + hr.diagonal().amax());
                    let mut shifted = hr.clone();
                    for i in 0..shifted.nrows() {
                        shifted[(i, i)] += shift;
                    }
                    let c = shifted.cholesky()?;
                    // a shift this small only rescues singular PSD matrices
                    let l = c.l();
                    let min_pivot = l.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
                    if min_pivot < 0.5 * shift {
                        return None;
                    }
                    c
                }
            };
            let y = chol.solve(&(-zg));
            let sf = &z * y;
            for (kk, &j) in free.iter().enumerate() {
                step[j] = sf[kk];
            }
        }

        let lambda = if k > 0 {
            // Aᵀλ = -(g + H p) over free variables
            let sf = DVector::from_fn(nf, |kk, _| step[free[kk]]);
            let rhs = -(&g_f + &h_ff * sf);
            let y = q_t.rows(0, k) * rhs;
            let lam = r_mat.solve_upper_triangular(&y).unwrap_or_else(|| DVector::zeros(k));
            lam.iter().copied().collect()
        } else {
            Vec::new()
        };
        Some(Subproblem { step, lambda })
    }

    fn multipliers(
        &self,
        g: &DVector<f64>,
        sub: &Subproblem,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let p = self.p;
        let n = p.dim();
        let mut lambda = DVector::zeros(p.a_ineq.nrows());
        for (k, &i) in self.work.iter().enumerate() {
            lambda[i] = sub.lambda[k];
        }
        // reduced gradient r = g + Aᵀλ; bound multipliers absorb it
        let r = g + p.a_ineq.tr_mul(&lambda);
        let mut lo = DVector::zeros(n);
        let mut hi = DVector::zeros(n);
        for j in 0..n {
            match self.bounds[j] {
                Bound::Lower => lo[j] = r[j],
                Bound::Upper => hi[j] = -r[j],
                Bound::Fixed => {
                    if r[j] >= 0.0 {
                        lo[j] = r[j]
                    } else {
                        hi[j] = -r[j]
                    }
                }
                Bound::Free => {}
            }
        }
        (lambda, lo, hi)
    }
}

#[derive(Clone, Copy)]
enum Release {
    Row(usize),
    Var(usize),
}

enum Blocking {
    Upper(usize),
    Lower(usize),
    Row(usize),
}

type Multipliers = (DVector<f64>, DVector<f64>, DVector<f64>);

fn finish(
    p: &QpProblem,
    x: DVector<f64>,
    iterations: usize,
    status: QpStatus,
    mult: Option<Multipliers>,
) -> QpResult {
    let n = p.dim();
    let (lambda, mu_lower, mu_upper) = mult.unwrap_or_else(|| {
        (
            DVector::zeros(p.a_ineq.nrows()),
            DVector::zeros(n),
            DVector::zeros(n),
        )
    });
    let g = &p.h * &x + &p.f;
    let dual = &g + p.a_ineq.tr_mul(&lambda) - &mu_lower + &mu_upper;
    let dual_residual = if status == QpStatus::Optimal { dual.amax() } else { f64::NAN };
    QpResult {
        objective: p.objective(&x),
        primal_residual: p.violation(&x),
        dual_residual,
        x,
        iterations,
        status,
        lambda,
        mu_lower,
        mu_upper,
    }
}
