use nalgebra::DMatrix;

use super::qp::{LinExpr, QuadraticProgram, SolverSettings};
use super::solution::SlsSolution;
use super::{SlsProblem, SoftPolytope};
use crate::crown::StepModel;
use crate::error::Result;

/// Index map from the structured decision variables to positions in the QP vector.
///
/// Only blocks that can multiply a non-zero virtual disturbance are variables:
/// `Φx(t, c)` for `1 ≤ c < t ≤ T` (the diagonal is `diag(ψ_{t-1})`), `Φu(t, c)` for
/// `1 ≤ c ≤ t ≤ T-1` and the off-diagonal `Ψ(t, c)` for `1 ≤ c < t ≤ T`. Column 0
/// multiplies the zero leading block of the virtual disturbance and is filled in
/// after the solve.
#[derive(Debug, Clone)]
pub struct SlsLayout {
    pub horizon: usize,
    pub nx: usize,
    pub nu: usize,
    pub state_rows: usize,
    pub input_rows: usize,
    /// Trust-region rows acting on the state part only, and the remaining rows.
    pub trust_state_rows: usize,
    pub trust_input_rows: usize,
    h: usize,
    v: usize,
    psi: usize,
    phi_x: usize,
    phi_u: usize,
    psi_off: usize,
    eps_x: usize,
    eps_u: usize,
    sig_x: usize,
    sig_u: usize,
    /// Variables other than the 1-norm epigraph auxiliaries.
    pub structural_vars: usize,
}

impl SlsLayout {
    fn allocate(
        qp: &mut QuadraticProgram,
        horizon: usize,
        nx: usize,
        nu: usize,
        state_rows: usize,
        input_rows: usize,
        trust_state_rows: usize,
        trust_input_rows: usize,
    ) -> Self {
        let t = horizon;
        let strict = t * t.saturating_sub(1) / 2;
        let h = qp.add_vars((t + 1) * nx);
        let v = qp.add_vars(t * nu);
        let psi = qp.add_vars(t * nx);
        let phi_x = qp.add_vars(strict * nx * nx);
        let phi_u = qp.add_vars(strict * nu * nx);
        let psi_off = qp.add_vars(strict * nx * nx);
        let eps_x = qp.add_vars((t + 1) * state_rows);
        let eps_u = qp.add_vars(t * input_rows);
        let sig_x = qp.add_vars(t * trust_state_rows);
        let sig_u = qp.add_vars(t * trust_input_rows);
        Self {
            horizon,
            nx,
            nu,
            state_rows,
            input_rows,
            trust_state_rows,
            trust_input_rows,
            h,
            v,
            psi,
            phi_x,
            phi_u,
            psi_off,
            eps_x,
            eps_u,
            sig_x,
            sig_u,
            structural_vars: qp.num_vars,
        }
    }

    pub fn h(&self, t: usize, i: usize) -> usize {
        self.h + t * self.nx + i
    }

    pub fn v(&self, t: usize, k: usize) -> usize {
        debug_assert!(t < self.horizon);
        self.v + t * self.nu + k
    }

    pub fn psi(&self, t: usize, i: usize) -> usize {
        debug_assert!(t < self.horizon);
        self.psi + t * self.nx + i
    }

    /// Position of block `(t, c)`, `1 ≤ c < t`, among the strictly lower blocks.
    fn strict_block(t: usize, c: usize) -> usize {
        debug_assert!(1 <= c && c < t);
        (t - 1) * (t - 2) / 2 + (c - 1)
    }

    /// Variable holding entry `(r, s)` of `Φx(t, c)`, or `None` for a structural zero.
    pub fn phi_x(&self, t: usize, c: usize, r: usize, s: usize) -> Option<usize> {
        debug_assert!(c >= 1 && c <= t && t <= self.horizon);
        if c == t {
            (r == s).then(|| self.psi(t - 1, r))
        } else {
            Some(self.phi_x + Self::strict_block(t, c) * self.nx * self.nx + r * self.nx + s)
        }
    }

    pub fn phi_u(&self, t: usize, c: usize, k: usize, s: usize) -> usize {
        debug_assert!(c >= 1 && c <= t && t < self.horizon);
        let block = t * (t - 1) / 2 + (c - 1);
        self.phi_u + block * self.nu * self.nx + k * self.nx + s
    }

    /// Variable holding entry `(r, s)` of `Ψ(t, c)`, `1 ≤ c ≤ t`.
    pub fn psi_block(&self, t: usize, c: usize, r: usize, s: usize) -> Option<usize> {
        if c == t {
            (r == s).then(|| self.psi(t - 1, r))
        } else {
            Some(self.psi_off + Self::strict_block(t, c) * self.nx * self.nx + r * self.nx + s)
        }
    }

    pub fn eps_x(&self, t: usize, j: usize) -> usize {
        self.eps_x + t * self.state_rows + j
    }

    pub fn eps_u(&self, t: usize, j: usize) -> usize {
        self.eps_u + t * self.input_rows + j
    }

    pub fn sig_x(&self, t: usize, j: usize) -> usize {
        self.sig_x + t * self.trust_state_rows + j
    }

    pub fn sig_u(&self, t: usize, j: usize) -> usize {
        self.sig_u + t * self.trust_input_rows + j
    }

    pub fn slack_range(&self) -> std::ops::Range<usize> {
        self.eps_x..self.structural_vars
    }
}

/// Assembled program plus what is needed to map its solution back.
#[derive(Debug, Clone)]
pub struct SlsQp {
    pub qp: QuadraticProgram,
    pub layout: SlsLayout,
    pub(crate) dynamics: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    pub psi_min: f64,
}

impl SlsQp {
    pub fn solve(&self, settings: &SolverSettings) -> Result<SlsSolution> {
        let raw = self.qp.solve(settings)?;
        Ok(SlsSolution::from_raw(self, raw))
    }
}

struct Builder<'a> {
    qp: QuadraticProgram,
    layout: SlsLayout,
    problem: &'a SlsProblem,
}

impl Builder<'_> {
    /// Epigraph variable `s ≥ |expr|`.
    fn abs_aux(&mut self, expr: &LinExpr) -> usize {
        let s = self.qp.add_var();
        let mut pos = expr.clone();
        pos.add_term(s, -1.0);
        self.qp.add_le(pos);
        let mut neg = LinExpr::default();
        neg.add_scaled(expr, -1.0);
        neg.add_term(s, -1.0);
        self.qp.add_le(neg);
        s
    }

    /// `a_xᵀ h_t + a_uᵀ v_t + Σ_c ‖a_xᵀ Φx(t,c) + a_uᵀ Φu(t,c)‖₁ ≤ rhs + slack`.
    fn tightened_row(&mut self, t: usize, ax: &[f64], au: &[f64], rhs: f64, slack: usize) {
        let (nx, nu) = (self.layout.nx, self.layout.nu);
        let uses_input = au.iter().any(|&a| a != 0.0);
        debug_assert!(!uses_input || t < self.layout.horizon);
        let mut row = LinExpr::constant(self.problem.backoff - rhs);
        for r in 0..nx {
            row.add_term(self.layout.h(t, r), ax[r]);
        }
        if uses_input {
            for k in 0..nu {
                row.add_term(self.layout.v(t, k), au[k]);
            }
        }
        for c in 1..=t {
            for s in 0..nx {
                let mut e = LinExpr::default();
                for r in 0..nx {
                    if let Some(var) = self.layout.phi_x(t, c, r, s) {
                        e.add_term(var, ax[r]);
                    }
                }
                if uses_input {
                    for k in 0..nu {
                        e.add_term(self.layout.phi_u(t, c, k, s), au[k]);
                    }
                }
                let aux = self.abs_aux(&e);
                row.add_term(aux, 1.0);
            }
        }
        row.add_term(slack, -1.0);
        self.qp.add_le(row);
    }

    /// One side of the residual over-approximation for component `i` at step `t`.
    fn over_approximation(&mut self, t: usize, i: usize, step: &StepModel, upper: bool) {
        let (nx, nu) = (self.layout.nx, self.layout.nu);
        let (gain, offset, sign) = if upper {
            (&step.gain_upper, step.offset_upper[i], 1.0)
        } else {
            (&step.gain_lower, step.offset_lower[i], -1.0)
        };
        let mut row = LinExpr::constant(self.problem.model.sigma_w + sign * offset + self.problem.backoff);
        for r in 0..nx {
            row.add_term(self.layout.h(t, r), sign * gain[(i, r)]);
        }
        for k in 0..nu {
            row.add_term(self.layout.v(t, k), sign * gain[(i, nx + k)]);
        }
        for c in 1..=t {
            for s in 0..nx {
                let mut e = LinExpr::default();
                for r in 0..nx {
                    if let Some(var) = self.layout.phi_x(t, c, r, s) {
                        e.add_term(var, gain[(i, r)]);
                    }
                }
                for k in 0..nu {
                    e.add_term(self.layout.phi_u(t, c, k, s), gain[(i, nx + k)]);
                }
                if let Some(var) = self.layout.psi_block(t + 1, c, i, s) {
                    e.add_term(var, -1.0);
                }
                let aux = self.abs_aux(&e);
                row.add_term(aux, 1.0);
            }
        }
        row.add_term(self.layout.psi(t, i), -1.0);
        self.qp.add_le(row);
    }
}

fn split_rows(poly: &SoftPolytope, nx: usize) -> (Vec<usize>, Vec<usize>) {
    (0..poly.num_rows()).partition(|&j| poly.f.row(j).columns(nx, poly.dim() - nx).iter().all(|&a| a == 0.0))
}

/// Builds the soft-constrained program for `problem`.
pub fn assemble(problem: &SlsProblem) -> Result<SlsQp> {
    problem.validate()?;
    let model = &problem.model;
    let (nx, nu, horizon) = (model.nx(), model.nu(), model.horizon());
    let trust: Vec<SoftPolytope> = problem
        .trust_regions
        .iter()
        .map(SoftPolytope::from_trust_region)
        .collect::<Result<_>>()?;
    let (trust_state, trust_input) = split_rows(&trust[0], nx);

    let mut qp = QuadraticProgram::default();
    let layout = SlsLayout::allocate(
        &mut qp,
        horizon,
        nx,
        nu,
        problem.state_set.num_rows(),
        problem.input_set.num_rows(),
        trust_state.len(),
        trust_input.len(),
    );
    let mut b = Builder { qp, layout, problem };
    let l = b.layout.clone();

    // objective ‖v_0 − u_ref‖² plus slack penalties
    for k in 0..nu {
        b.qp.p_entries.push((l.v(0, k), l.v(0, k), 2.0));
        b.qp.q[l.v(0, k)] = -2.0 * problem.u_ref[k];
    }
    b.qp.constant = problem.u_ref.norm_squared();
    for var in l.slack_range() {
        b.qp.q[var] = if var < l.sig_x(0, 0) {
            problem.penalties.constraint
        } else {
            problem.penalties.trust_region
        };
        b.qp.add_le(LinExpr { terms: vec![(var, -1.0)], constant: 0.0 });
    }

    // nominal trajectory
    for i in 0..nx {
        b.qp.add_eq(LinExpr { terms: vec![(l.h(0, i), 1.0)], constant: -problem.x0[i] });
    }
    for (t, step) in model.steps.iter().enumerate() {
        for i in 0..nx {
            let mut e = LinExpr { terms: vec![(l.h(t + 1, i), 1.0)], constant: -step.c[i] };
            for r in 0..nx {
                e.add_term(l.h(t, r), -step.a[(i, r)]);
            }
            for k in 0..nu {
                e.add_term(l.v(t, k), -step.b[(i, k)]);
            }
            b.qp.add_eq(e);
        }
    }

    // [I − ZA, −ZB][Φx; Φu] = Ψ on the strictly lower blocks; the diagonal holds by
    // construction since Φx(t, t) and Ψ(t, t) share the ψ variables.
    for t in 2..=horizon {
        let step = &model.steps[t - 1];
        for c in 1..t {
            for r in 0..nx {
                for s in 0..nx {
                    let mut e = LinExpr::default();
                    e.add_term(l.phi_x(t, c, r, s).expect("strict block"), 1.0);
                    for q in 0..nx {
                        if let Some(var) = l.phi_x(t - 1, c, q, s) {
                            e.add_term(var, -step.a[(r, q)]);
                        }
                    }
                    for k in 0..nu {
                        e.add_term(l.phi_u(t - 1, c, k, s), -step.b[(r, k)]);
                    }
                    e.add_term(l.psi_block(t, c, r, s).expect("strict block"), -1.0);
                    b.qp.add_eq(e);
                }
            }
        }
    }

    // virtual disturbance filter floor and residual over-approximation
    for t in 0..horizon {
        for i in 0..nx {
            b.qp.add_le(LinExpr { terms: vec![(l.psi(t, i), -1.0)], constant: problem.psi_min });
        }
    }
    for (t, step) in model.steps.iter().enumerate() {
        for i in 0..nx {
            b.over_approximation(t, i, step, true);
            b.over_approximation(t, i, step, false);
        }
    }

    // tightened soft constraints
    let zeros_u = vec![0.0; nu];
    let zeros_x = vec![0.0; nx];
    for t in 0..=horizon {
        for j in 0..l.state_rows {
            let ax: Vec<f64> = problem.state_set.f.row(j).iter().copied().collect();
            b.tightened_row(t, &ax, &zeros_u, problem.state_set.b[j], l.eps_x(t, j));
        }
    }
    for t in 0..horizon {
        for j in 0..l.input_rows {
            let au: Vec<f64> = problem.input_set.f.row(j).iter().copied().collect();
            b.tightened_row(t, &zeros_x, &au, problem.input_set.b[j], l.eps_u(t, j));
        }
        let poly = &trust[t];
        let (state_rows, input_rows) = split_rows(poly, nx);
        for (slot, &j) in state_rows.iter().enumerate() {
            let ax: Vec<f64> = poly.f.row(j).columns(0, nx).iter().copied().collect();
            b.tightened_row(t, &ax, &zeros_u, poly.b[j], l.sig_x(t, slot));
        }
        for (slot, &j) in input_rows.iter().enumerate() {
            let ax: Vec<f64> = poly.f.row(j).columns(0, nx).iter().copied().collect();
            let au: Vec<f64> = poly.f.row(j).columns(nx, nu).iter().copied().collect();
            b.tightened_row(t, &ax, &au, poly.b[j], l.sig_u(t, slot));
        }
    }

    let dynamics = model.steps.iter().map(|s| (s.a.clone(), s.b.clone())).collect();
    Ok(SlsQp { qp: b.qp, layout: l, dynamics, psi_min: problem.psi_min })
}

#[cfg(test)]
mod tests {
    use nalgebra::DVector;

    use super::*;
    use crate::crown::{TrustRegion, UncertaintyModel};
    use crate::sls::{max_slack, SoftPolytope};

    fn scalar_problem(u_ref: f64) -> SlsProblem {
        let one = DMatrix::from_element(1, 1, 1.0);
        let step = StepModel::exact(one.clone(), one, DVector::zeros(1));
        let mut p = SlsProblem::new(
            UncertaintyModel::new(vec![step], 0.0).unwrap(),
            SoftPolytope::symmetric_box(&[1.0]).unwrap(),
            SoftPolytope::symmetric_box(&[1.0]).unwrap(),
            vec![TrustRegion::new(DVector::zeros(2), 10.0).unwrap()],
            DVector::zeros(1),
            DVector::from_element(1, u_ref),
        );
        // the hand solution ignores the ψ floor and the round-off margin
        p.psi_min = 1e-9;
        p.backoff = 0.0;
        p
    }

    #[test]
    fn scalar_reference_is_kept() {
        let sol = assemble(&scalar_problem(0.5)).unwrap().solve(&SolverSettings::default()).unwrap();
        assert!((sol.v[0][0] - 0.5).abs() < 1e-6);
        assert!(sol.objective.abs() < 1e-6);
        assert!(max_slack(&sol) < SLACK);
    }

    const SLACK: f64 = 1e-7;

    #[test]
    fn scalar_box_projection() {
        let sol = assemble(&scalar_problem(5.0)).unwrap().solve(&SolverSettings::default()).unwrap();
        assert!((sol.v[0][0] - 1.0).abs() < 1e-6, "{}", sol.v[0][0]);
        assert!((sol.objective - 16.0).abs() < 1e-6, "{}", sol.objective);
        assert!(sol.eps_u[0][0] < SLACK);
    }

    #[test]
    fn default_floor_shifts_the_optimum_by_psi_min() {
        let mut p = scalar_problem(5.0);
        p.psi_min = 1e-6;
        let sol = assemble(&p).unwrap().solve(&SolverSettings::default()).unwrap();
        // x_1 = v_0 must leave room for ψ_0 ≥ ψ_min
        assert!((sol.v[0][0] - (1.0 - 1e-6)).abs() < 1e-8, "{}", sol.v[0][0]);
    }

    #[test]
    fn doubling_an_inactive_penalty_changes_nothing() {
        let mut p = scalar_problem(0.3);
        let a = assemble(&p).unwrap().solve(&SolverSettings::default()).unwrap();
        p.penalties.constraint *= 2.0;
        let b = assemble(&p).unwrap().solve(&SolverSettings::default()).unwrap();
        assert!((a.v[0][0] - b.v[0][0]).abs() < 1e-7);
        assert!((a.objective - b.objective).abs() < 1e-7);
    }

    #[test]
    fn certain_model_leaves_only_the_floor_on_psi() {
        let mut p = scalar_problem(0.0);
        p.psi_min = 1e-6;
        let qp = assemble(&p).unwrap();
        let psi = qp.layout.psi(0, 0);
        // with T = 1 and no envelope both over-approximation rows collapse to -ψ ≤ 0
        let mut bounds: Vec<f64> = qp
            .qp
            .inequalities
            .iter()
            .filter(|r| r.coeffs == vec![(psi, -1.0)])
            .map(|r| r.rhs)
            .collect();
        bounds.sort_by(f64::total_cmp);
        assert_eq!(bounds, vec![-1e-6, 0.0, 0.0]);
        let sol = qp.solve(&SolverSettings::default()).unwrap();
        assert!(sol.psi_diag[0][0] >= 1e-6 - 1e-9);
    }

    #[test]
    fn infeasible_reference_is_absorbed_by_slack() {
        // x0 far outside X: only slack can make the program feasible
        let mut p = scalar_problem(0.0);
        p.x0 = DVector::from_element(1, 3.0);
        let sol = assemble(&p).unwrap().solve(&SolverSettings::default()).unwrap();
        assert!((sol.eps_x[0][0] - 2.0).abs() < 1e-6);
        assert!(max_slack(&sol) > 1.0);
    }

    #[test]
    fn pendulum_sized_variable_count() {
        let (nx, nu, horizon) = (2, 1, 10);
        let a = DMatrix::identity(nx, nx);
        let b = DMatrix::from_element(nx, nu, 0.1);
        let steps = vec![StepModel::exact(a, b, DVector::zeros(nx)); horizon];
        let p = SlsProblem::new(
            UncertaintyModel::new(steps, 0.1).unwrap(),
            SoftPolytope::symmetric_box(&[1.0, 1.0]).unwrap(),
            SoftPolytope::symmetric_box(&[1.0]).unwrap(),
            vec![TrustRegion::new(DVector::zeros(3), 1.0).unwrap(); horizon],
            DVector::zeros(2),
            DVector::zeros(1),
        );
        let qp = assemble(&p).unwrap();

        // strictly causal blocks below the diagonal of a (T+1)×(T+1) block pattern,
        // excluding column 0
        let below: usize = (1..=horizon).map(|t| t - 1).sum();
        let below_inputs: usize = (1..horizon).map(|t| t - 1).sum::<usize>() + (horizon - 1);
        let nominal = (horizon + 1) * nx + horizon * nu;
        let responses = horizon * nx + below * nx * nx + below_inputs * nu * nx + below * nx * nx;
        let slacks = (horizon + 1) * 4 + horizon * 2 + horizon * 2 * (nx + nu);
        // one epigraph variable per column of every Φ row in a 1-norm
        let cols = |t: usize| t * nx;
        let state_rows: usize = (0..=horizon).map(|t| 4 * cols(t)).sum();
        let per_step_rows = 2 + 2 * (nx + nu) + 2 * nx; // U, trust region, two sides of the envelope
        let other_rows: usize = (0..horizon).map(|t| per_step_rows * cols(t)).sum();
        let expected = nominal + responses + slacks + state_rows + other_rows;
        assert_eq!(expected, 2146);
        assert_eq!(qp.qp.num_vars, expected);
        assert_eq!(qp.layout.structural_vars, nominal + responses + slacks);
    }
}
