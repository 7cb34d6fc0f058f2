//! Sparse quadratic programs `min ½ xᵀPx + qᵀx + r  s.t.  Aeq x = beq, Ain x ≤ bin`
//! and their solution with Clarabel.

use std::io::Write;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus, ZeroConeT,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sparse affine expression `Σ coeff·x[var] + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub fn var(index: usize) -> Self {
        Self { terms: vec![(index, 1.0)], constant: 0.0 }
    }

    pub fn add_term(&mut self, index: usize, coeff: f64) {
        if coeff != 0.0 {
            self.terms.push((index, coeff));
        }
    }

    pub fn add_scaled(&mut self, other: &LinExpr, scale: f64) {
        for &(i, c) in &other.terms {
            self.add_term(i, scale * c);
        }
        self.constant += scale * other.constant;
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>() + self.constant
    }
}

/// One sparse row `coeffs · x (= or ≤) rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl LinearRow {
    fn from_expr(expr: LinExpr) -> Self {
        Self { coeffs: expr.terms, rhs: -expr.constant }
    }

    fn lhs(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(i, c)| c * x[i]).sum()
    }
}

#[derive(Debug, Clone, Default)]
pub struct QuadraticProgram {
    pub num_vars: usize,
    /// Upper-triangular entries of `P` (duplicates are summed).
    pub p_entries: Vec<(usize, usize, f64)>,
    pub q: Vec<f64>,
    pub constant: f64,
    pub equalities: Vec<LinearRow>,
    pub inequalities: Vec<LinearRow>,
}

impl QuadraticProgram {
    pub fn add_var(&mut self) -> usize {
        self.num_vars += 1;
        self.q.push(0.0);
        self.num_vars - 1
    }

    pub fn add_vars(&mut self, count: usize) -> usize {
        let start = self.num_vars;
        self.num_vars += count;
        self.q.resize(self.num_vars, 0.0);
        start
    }

    /// Adds `expr = 0`.
    pub fn add_eq(&mut self, expr: LinExpr) {
        self.equalities.push(LinearRow::from_expr(expr));
    }

    /// Adds `expr ≤ 0`.
    pub fn add_le(&mut self, expr: LinExpr) {
        self.inequalities.push(LinearRow::from_expr(expr));
    }

    pub fn num_constraints(&self) -> usize {
        self.equalities.len() + self.inequalities.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let quad: f64 = self
            .p_entries
            .iter()
            .map(|&(i, j, v)| if i == j { 0.5 * v * x[i] * x[i] } else { v * x[i] * x[j] })
            .sum();
        quad + self.q.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.constant
    }

    /// Largest equality residual or inequality violation at `x`.
    pub fn primal_residual(&self, x: &[f64]) -> f64 {
        let eq = self.equalities.iter().map(|r| (r.lhs(x) - r.rhs).abs());
        let ineq = self.inequalities.iter().map(|r| (r.lhs(x) - r.rhs).max(0.0));
        eq.chain(ineq).fold(0.0, f64::max)
    }

    fn validate(&self) -> Result<()> {
        let finite_rows = |rows: &[LinearRow]| {
            rows.iter().all(|r| r.rhs.is_finite() && r.coeffs.iter().all(|(_, c)| c.is_finite()))
        };
        if !self.q.iter().all(|v| v.is_finite())
            || !self.p_entries.iter().all(|(_, _, v)| v.is_finite())
            || !finite_rows(&self.equalities)
            || !finite_rows(&self.inequalities)
        {
            return Err(Error::NonFinite("QP data".into()));
        }
        Ok(())
    }

    fn csc(rows: usize, cols: usize, triplets: impl Iterator<Item = (usize, usize, f64)>) -> CscMatrix<f64> {
        let (mut i, mut j, mut v) = (Vec::new(), Vec::new(), Vec::new());
        for (r, c, val) in triplets {
            i.push(r);
            j.push(c);
            v.push(val);
        }
        CscMatrix::new_from_triplets(rows, cols, i, j, v)
    }

    fn constraint_triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.equalities
            .iter()
            .chain(&self.inequalities)
            .enumerate()
            .flat_map(|(r, row)| row.coeffs.iter().map(move |&(c, v)| (r, c, v)))
    }

    pub fn solve(&self, settings: &SolverSettings) -> Result<QpSolution> {
        self.validate()?;
        let n = self.num_vars;
        let m = self.num_constraints();
        let p = Self::csc(
            n,
            n,
            self.p_entries.iter().map(|&(i, j, v)| if i <= j { (i, j, v) } else { (j, i, v) }),
        );
        let a = Self::csc(m, n, self.constraint_triplets());
        let b: Vec<f64> = self.equalities.iter().chain(&self.inequalities).map(|r| r.rhs).collect();
        let cones = [ZeroConeT(self.equalities.len()), NonnegativeConeT(self.inequalities.len())];
        let clarabel_settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(settings.max_iter)
            .tol_feas(settings.tolerance)
            .tol_gap_abs(settings.tolerance)
            .tol_gap_rel(settings.tolerance)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut solver = DefaultSolver::new(&p, &self.q, &a, &b, &cones, clarabel_settings)
            .map_err(|e| Error::Solver(e.to_string()))?;
        solver.solve();
        let sol = &solver.solution;
        let status = format!("{:?}", sol.status);
        match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => {}
            SolverStatus::PrimalInfeasible
            | SolverStatus::DualInfeasible
            | SolverStatus::AlmostPrimalInfeasible
            | SolverStatus::AlmostDualInfeasible => return Err(Error::Infeasible(status)),
            _ => return Err(Error::Solver(status)),
        }
        let x = sol.x.clone();
        let primal_residual = self.primal_residual(&x);
        let gap = (sol.obj_val - sol.obj_val_dual).abs() / sol.obj_val.abs().max(1.0);
        if primal_residual > settings.accept_residual || gap > settings.accept_residual {
            return Err(Error::Solver(format!(
                "{status} with primal residual {primal_residual:.3e}, gap {gap:.3e}"
            )));
        }
        Ok(QpSolution {
            objective: self.objective(&x),
            x,
            status,
            primal_residual,
            relative_gap: gap,
            iterations: sol.iterations,
            solve_time: sol.solve_time,
        })
    }

    /// Writes the program as `l ≤ A x ≤ u` in a plain triplet text format:
    ///
    /// ```text
    /// # minimize 0.5 x'Px + q'x + r  subject to  l <= Ax <= u  (0-based indices)
    /// n <vars> m <rows>
    /// r <constant>
    /// P <nnz>        followed by <nnz> lines "i j value" (upper triangle)
    /// q              followed by <vars> lines
    /// A <nnz>        followed by <nnz> lines "i j value"
    /// bounds         followed by <rows> lines "l u" (inf for unbounded)
    /// ```
    pub fn write_triplets<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# minimize 0.5 x'Px + q'x + r  subject to  l <= Ax <= u  (0-based indices)")?;
        writeln!(w, "n {} m {}", self.num_vars, self.num_constraints())?;
        writeln!(w, "r {:e}", self.constant)?;
        writeln!(w, "P {}", self.p_entries.len())?;
        for &(i, j, v) in &self.p_entries {
            let (i, j) = if i <= j { (i, j) } else { (j, i) };
            writeln!(w, "{i} {j} {v:e}")?;
        }
        writeln!(w, "q")?;
        for v in &self.q {
            writeln!(w, "{v:e}")?;
        }
        let triplets: Vec<_> = self.constraint_triplets().collect();
        writeln!(w, "A {}", triplets.len())?;
        for (i, j, v) in triplets {
            writeln!(w, "{i} {j} {v:e}")?;
        }
        writeln!(w, "bounds")?;
        for row in &self.equalities {
            writeln!(w, "{:e} {:e}", row.rhs, row.rhs)?;
        }
        for row in &self.inequalities {
            writeln!(w, "-inf {:e}", row.rhs)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub max_iter: u32,
    /// Clarabel feasibility and gap tolerance.
    pub tolerance: f64,
    /// Reject a reported solution whose primal residual or relative gap exceeds this.
    pub accept_residual: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { max_iter: 200, tolerance: 1e-9, accept_residual: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: String,
    pub primal_residual: f64,
    pub relative_gap: f64,
    pub iterations: u32,
    pub solve_time: f64,
}
