use nalgebra::{DMatrix, DVector};

use super::assemble::SlsQp;
use super::blt::BltOperator;
use super::qp::QpSolution;

/// Slack values at or below this count as zero when deciding certification.
pub const SLACK_ZERO_TOL: f64 = 1e-7;

/// Structured solution of the synthesis program.
#[derive(Debug, Clone)]
pub struct SlsSolution {
    pub phi_x: BltOperator,
    pub phi_u: BltOperator,
    pub psi: BltOperator,
    /// Diagonal of the disturbance filter, `ψ_t` for `t ∈ [0, T-1]`.
    pub psi_diag: Vec<DVector<f64>>,
    /// Nominal states `h_0..h_T` and inputs `v_0..v_{T-1}`.
    pub h: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    pub eps_x: Vec<DVector<f64>>,
    pub eps_u: Vec<DVector<f64>>,
    pub sig_x: Vec<DVector<f64>>,
    pub sig_u: Vec<DVector<f64>>,
    pub objective: f64,
    pub status: String,
    pub primal_residual: f64,
    pub relative_gap: f64,
    pub iterations: u32,
    pub solve_time: f64,
    pub psi_min: f64,
    pub(crate) dynamics: Vec<(DMatrix<f64>, DMatrix<f64>)>,
}

fn gather(x: &[f64], count: usize, len: usize, index: impl Fn(usize, usize) -> usize) -> Vec<DVector<f64>> {
    (0..count).map(|t| DVector::from_fn(len, |j, _| x[index(t, j)])).collect()
}

impl SlsSolution {
    pub(crate) fn from_raw(qp: &SlsQp, raw: QpSolution) -> Self {
        let l = &qp.layout;
        let (horizon, nx, nu) = (l.horizon, l.nx, l.nu);
        let x = &raw.x;
        let mut phi_x = BltOperator::zeros(horizon, nx, nx);
        let mut phi_u = BltOperator::zeros(horizon, nu, nx);
        let mut psi = BltOperator::zeros(horizon, nx, nx);
        let value = |v: Option<usize>| v.map_or(0.0, |i| x[i]);
        for t in 1..=horizon {
            for c in 1..=t {
                *phi_x.block_mut(t, c) = DMatrix::from_fn(nx, nx, |r, s| value(l.phi_x(t, c, r, s)));
                *psi.block_mut(t, c) = DMatrix::from_fn(nx, nx, |r, s| value(l.psi_block(t, c, r, s)));
                if t < horizon {
                    *phi_u.block_mut(t, c) = DMatrix::from_fn(nu, nx, |k, s| x[l.phi_u(t, c, k, s)]);
                }
            }
        }
        // column 0 multiplies the zero leading disturbance block
        *phi_x.block_mut(0, 0) = DMatrix::identity(nx, nx);
        *psi.block_mut(0, 0) = DMatrix::identity(nx, nx);
        for t in 1..=horizon {
            let next = &qp.dynamics[t - 1].0 * phi_x.block(t - 1, 0);
            *phi_x.block_mut(t, 0) = next;
        }

        Self {
            phi_x,
            phi_u,
            psi,
            psi_diag: gather(x, horizon, nx, |t, i| l.psi(t, i)),
            h: gather(x, horizon + 1, nx, |t, i| l.h(t, i)),
            v: gather(x, horizon, nu, |t, k| l.v(t, k)),
            eps_x: gather(x, horizon + 1, l.state_rows, |t, j| l.eps_x(t, j)),
            eps_u: gather(x, horizon, l.input_rows, |t, j| l.eps_u(t, j)),
            sig_x: gather(x, horizon, l.trust_state_rows, |t, j| l.sig_x(t, j)),
            sig_u: gather(x, horizon, l.trust_input_rows, |t, j| l.sig_u(t, j)),
            objective: raw.objective,
            status: raw.status,
            primal_residual: raw.primal_residual,
            relative_gap: raw.relative_gap,
            iterations: raw.iterations,
            solve_time: raw.solve_time,
            psi_min: qp.psi_min,
            dynamics: qp.dynamics.clone(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.h.len() - 1
    }

    /// Largest absolute entry of `[I − Z Â, −Z B̂][Φx; Φu] − Ψ` over all blocks.
    pub fn affine_residual(&self) -> f64 {
        let horizon = self.horizon();
        let mut worst = 0.0_f64;
        for t in 0..=horizon {
            for c in 0..=t {
                let mut r = self.phi_x.block(t, c) - self.psi.block(t, c);
                if t >= 1 && c < t {
                    let (a, b) = &self.dynamics[t - 1];
                    r -= a * self.phi_x.block(t - 1, c) + b * self.phi_u.block(t - 1, c);
                }
                worst = worst.max(r.amax());
            }
        }
        worst
    }

    /// `u_0 = v_0`, the input applied at the current state.
    pub fn first_input(&self) -> &DVector<f64> {
        &self.v[0]
    }

    pub fn slacks(&self) -> impl Iterator<Item = f64> + '_ {
        self.eps_x
            .iter()
            .chain(&self.eps_u)
            .chain(&self.sig_x)
            .chain(&self.sig_u)
            .flat_map(|v| v.iter().copied())
    }

    pub fn is_certified(&self, tol: f64) -> bool {
        max_slack(self) <= tol
    }
}

/// Largest slack value; anything at or below [`SLACK_ZERO_TOL`] reads as `0`.
pub fn max_slack(sol: &SlsSolution) -> f64 {
    let worst = sol.slacks().fold(0.0, f64::max);
    if worst <= SLACK_ZERO_TOL {
        0.0
    } else {
        worst
    }
}
