//! Box-constrained iLQR on the learned model, with an optional hinge penalty on
//! state constraints (the soft-constrained variant).

use nalgebra::{DMatrix, DVector};

use crate::dynamics::LearnedModel;
use crate::error::{Error, Result};
use crate::psf::rollout_nominal;
use crate::sls::SoftPolytope;

#[derive(Debug, Clone)]
pub struct IlqrSpec {
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_terminal: DMatrix<f64>,
    /// Reference states `r_0..r_T`.
    pub reference: Vec<DVector<f64>>,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    /// Hinge weight `ρ` and the rows it applies to; `ρ = 0` gives plain iLQR.
    pub rho: f64,
    pub state_set: Option<SoftPolytope>,
    /// Stop when the relative cost decrease falls below this.
    pub tol: f64,
    pub max_iter: usize,
    pub mu_max: f64,
}

impl IlqrSpec {
    pub fn new(horizon: usize, q: DMatrix<f64>, r: DMatrix<f64>, reference: Vec<DVector<f64>>) -> Self {
        let nu = r.nrows();
        Self {
            horizon,
            q_terminal: q.clone(),
            q,
            r,
            reference,
            u_min: DVector::from_element(nu, f64::NEG_INFINITY),
            u_max: DVector::from_element(nu, f64::INFINITY),
            rho: 0.0,
            state_set: None,
            tol: 1e-9,
            max_iter: 100,
            mu_max: 1e10,
        }
    }

    pub fn validate(&self, nx: usize, nu: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("iLQR horizon must be at least 1".into()));
        }
        if self.q.shape() != (nx, nx) || self.q_terminal.shape() != (nx, nx) || self.r.shape() != (nu, nu) {
            return Err(Error::Dimension("iLQR weights".into()));
        }
        if self.reference.len() != self.horizon + 1 || self.reference.iter().any(|r| r.len() != nx) {
            return Err(Error::Dimension(format!("iLQR needs {} reference states", self.horizon + 1)));
        }
        if self.u_min.len() != nu || self.u_max.len() != nu || self.u_min.iter().zip(&self.u_max).any(|(a, b)| !(a <= b)) {
            return Err(Error::Config("control box".into()));
        }
        if !(self.rho >= 0.0) {
            return Err(Error::Config(format!("penalty weight {} must be non-negative", self.rho)));
        }
        if self.rho > 0.0 && self.state_set.as_ref().is_some_and(|s| s.dim() != nx) {
            return Err(Error::Dimension("penalized state set".into()));
        }
        if self.r.clone().cholesky().is_none() {
            return Err(Error::Config("R must be positive definite".into()));
        }
        Ok(())
    }

    pub fn clamp(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |i, _| u[i].clamp(self.u_min[i], self.u_max[i]))
    }

    /// `ρ Σ_j max(0, a_jᵀx − b_j)`.
    pub fn penalty(&self, x: &DVector<f64>) -> f64 {
        match &self.state_set {
            Some(set) if self.rho > 0.0 => self.rho * (&set.f * x - &set.b).iter().map(|&v| v.max(0.0)).sum::<f64>(),
            _ => 0.0,
        }
    }

    /// Subgradient of [`Self::penalty`], taking zero on the kink.
    pub fn penalty_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        if let Some(set) = self.state_set.as_ref().filter(|_| self.rho > 0.0) {
            let slack = &set.f * x - &set.b;
            for (j, &s) in slack.iter().enumerate() {
                if s > 0.0 {
                    g += set.f.row(j).transpose() * self.rho;
                }
            }
        }
        g
    }

    pub fn stage_cost(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let e = x - &self.reference[t];
        (e.transpose() * &self.q * &e)[0] + (u.transpose() * &self.r * u)[0] + self.penalty(x)
    }

    pub fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        let e = x - &self.reference[self.horizon];
        (e.transpose() * &self.q_terminal * &e)[0] + self.penalty(x)
    }

    pub fn total_cost(&self, states: &[DVector<f64>], controls: &[DVector<f64>]) -> f64 {
        let running: f64 = controls.iter().enumerate().map(|(t, u)| self.stage_cost(t, &states[t], u)).sum();
        running + self.terminal_cost(&states[self.horizon])
    }
}

#[derive(Debug, Clone)]
pub struct IlqrSolution {
    pub controls: Vec<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
    pub cost: f64,
    pub iterations: usize,
    /// Cost after every accepted iteration, starting with the initial guess.
    pub trace: Vec<f64>,
}

struct Gains {
    k: Vec<DVector<f64>>,
    big_k: Vec<DMatrix<f64>>,
}

/// Indices of inputs whose Newton step would leave the box.
fn clamped_set(u: &DVector<f64>, step: &DVector<f64>, spec: &IlqrSpec) -> Vec<bool> {
    (0..u.len())
        .map(|i| {
            let target = u[i] + step[i];
            target > spec.u_max[i] || target < spec.u_min[i]
        })
        .collect()
}

fn backward(
    model: &LearnedModel,
    spec: &IlqrSpec,
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
    mu: f64,
) -> Result<Option<Gains>> {
    let (nx, nu) = (model.nx(), model.nu());
    let horizon = spec.horizon;
    let mut vx = 2.0 * &spec.q_terminal * (&states[horizon] - &spec.reference[horizon]) + spec.penalty_gradient(&states[horizon]);
    let mut vxx = 2.0 * &spec.q_terminal;
    let mut k = vec![DVector::zeros(nu); horizon];
    let mut big_k = vec![DMatrix::zeros(nu, nx); horizon];
    for t in (0..horizon).rev() {
        let (x, u) = (&states[t], &controls[t]);
        let (fx, fu) = model.linearize(x, u)?;
        let lx = 2.0 * &spec.q * (x - &spec.reference[t]) + spec.penalty_gradient(x);
        let lu = 2.0 * &spec.r * u;
        let qx = lx + fx.transpose() * &vx;
        let qu = lu + fu.transpose() * &vx;
        let qxx = 2.0 * &spec.q + fx.transpose() * &vxx * &fx;
        let quu = 2.0 * &spec.r + fu.transpose() * &vxx * &fu;
        let qux = fu.transpose() * &vxx * &fx;
        let quu_reg = &quu + DMatrix::identity(nu, nu) * mu;

        let Some(chol) = quu_reg.clone().cholesky() else { return Ok(None) };
        let mut kt = -chol.solve(&qu);
        let mut kk = -chol.solve(&qux);
        let clamped = clamped_set(u, &kt, spec);
        if clamped.iter().any(|&c| c) {
            // saturated inputs are pinned at the bound; the rest are re-solved with them fixed
            let free: Vec<usize> = (0..nu).filter(|&i| !clamped[i]).collect();
            for i in 0..nu {
                if clamped[i] {
                    kt[i] = (u[i] + kt[i]).clamp(spec.u_min[i], spec.u_max[i]) - u[i];
                    kk.row_mut(i).fill(0.0);
                }
            }
            if !free.is_empty() {
                let quu_ff = quu_reg.select_rows(&free).select_columns(&free);
                let Some(chol_f) = quu_ff.cholesky() else { return Ok(None) };
                let clamped_idx: Vec<usize> = (0..nu).filter(|&i| clamped[i]).collect();
                let coupling = quu_reg.select_rows(&free).select_columns(&clamped_idx) * kt.select_rows(&clamped_idx);
                let kf = -chol_f.solve(&(qu.select_rows(&free) + coupling));
                let kkf = -chol_f.solve(&qux.select_rows(&free));
                for (n, &i) in free.iter().enumerate() {
                    kt[i] = kf[n];
                    kk.row_mut(i).copy_from(&kkf.row(n));
                }
            }
        }

        vx = &qx + kk.transpose() * &quu * &kt + kk.transpose() * &qu + qux.transpose() * &kt;
        vxx = &qxx + kk.transpose() * &quu * &kk + kk.transpose() * &qux + qux.transpose() * &kk;
        vxx = (&vxx + vxx.transpose()) * 0.5;
        k[t] = kt;
        big_k[t] = kk;
    }
    Ok(Some(Gains { k, big_k }))
}

fn forward(
    model: &LearnedModel,
    spec: &IlqrSpec,
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
    gains: &Gains,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let mut new_states = vec![states[0].clone()];
    let mut new_controls = Vec::with_capacity(spec.horizon);
    for t in 0..spec.horizon {
        let dx = &new_states[t] - &states[t];
        let u = spec.clamp(&(&controls[t] + &gains.k[t] + &gains.big_k[t] * dx));
        let next = model.step(&new_states[t], &u)?;
        new_controls.push(u);
        new_states.push(next);
    }
    Ok((new_states, new_controls))
}

/// Plans `spec.horizon` inputs from `x0`, starting from `init` (clamped into the box).
pub fn ilqr_plan(model: &LearnedModel, spec: &IlqrSpec, x0: &DVector<f64>, init: &[DVector<f64>]) -> Result<IlqrSolution> {
    spec.validate(model.nx(), model.nu())?;
    if init.len() != spec.horizon || x0.len() != model.nx() {
        return Err(Error::Dimension(format!("iLQR initial guess of {} inputs for horizon {}", init.len(), spec.horizon)));
    }
    let mut controls: Vec<DVector<f64>> = init.iter().map(|u| spec.clamp(u)).collect();
    let mut states = rollout_nominal(model, x0, &controls)?;
    let mut cost = spec.total_cost(&states, &controls);
    let mut trace = vec![cost];
    if !cost.is_finite() {
        return Err(Error::Divergence { iteration: 0, trace });
    }
    let mut mu = 0.0;
    let mut iterations = 0;
    while iterations < spec.max_iter {
        iterations += 1;
        let Some(gains) = backward(model, spec, &states, &controls, mu)? else {
            mu = (mu * 10.0).max(1e-6);
            if mu > spec.mu_max {
                break;
            }
            continue;
        };
        let (new_states, new_controls) = match forward(model, spec, &states, &controls, &gains) {
            Ok(found) => found,
            Err(Error::NonFinite(_)) => {
                trace.push(f64::NAN);
                return Err(Error::Divergence { iteration: iterations, trace });
            }
            Err(e) => return Err(e),
        };
        let new_cost = spec.total_cost(&new_states, &new_controls);
        if !new_cost.is_finite() {
            trace.push(new_cost);
            return Err(Error::Divergence { iteration: iterations, trace });
        }
        if new_cost < cost {
            let decrease = (cost - new_cost) / cost.abs().max(1e-12);
            states = new_states;
            controls = new_controls;
            cost = new_cost;
            trace.push(cost);
            mu = if mu < 1e-8 { 0.0 } else { mu / 10.0 };
            if decrease < spec.tol {
                break;
            }
        } else {
            mu = (mu * 10.0).max(1e-6);
            if mu > spec.mu_max {
                break;
            }
        }
    }
    Ok(IlqrSolution { controls, states, cost, iterations, trace })
}

/// Receding-horizon wrapper that warm-starts each plan from the shifted previous one.
#[derive(Debug, Clone)]
pub struct PrimaryController {
    pub model: LearnedModel,
    pub spec: IlqrSpec,
    plan: Option<Vec<DVector<f64>>>,
}

impl PrimaryController {
    pub fn new(model: LearnedModel, spec: IlqrSpec) -> Result<Self> {
        spec.validate(model.nx(), model.nu())?;
        Ok(Self { model, spec, plan: None })
    }

    /// Plans from `x` towards `reference` (`T_ctrl + 1` states) and returns the first
    /// input together with the whole planned sequence.
    pub fn plan(&mut self, x: &DVector<f64>, reference: Vec<DVector<f64>>) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
        let nu = self.model.nu();
        let horizon = self.spec.horizon;
        let init = match self.plan.take() {
            Some(mut prev) => {
                prev.remove(0);
                let last = prev.last().cloned().unwrap_or_else(|| DVector::zeros(nu));
                prev.push(last);
                prev
            }
            None => vec![DVector::zeros(nu); horizon],
        };
        self.spec.reference = reference;
        let solution = ilqr_plan(&self.model, &self.spec, x, &init)?;
        self.plan = Some(solution.controls.clone());
        Ok((solution.controls[0].clone(), solution.controls))
    }

    pub fn reset(&mut self) {
        self.plan = None;
    }
}
