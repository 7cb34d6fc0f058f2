use nalgebra::DVector;

use super::blt::BltOperator;
use super::solution::SlsSolution;
use crate::error::{Error, Result};

/// State-feedback realization of a synthesized response.
///
/// At step `t ≥ 1` the virtual disturbance is recovered as
/// `w̃_{t-1} = diag(ψ_{t-1})⁻¹ (x_t − h_t − Σ_{i<t} Φx(t,i) w̃_{i-1})`
/// and the input is `u_t = v_t + Σ_{i≤t} Φu(t,i) w̃_{i-1}`. Steps must be visited in order.
#[derive(Debug, Clone)]
pub struct FeedbackPolicy {
    phi_x: BltOperator,
    phi_u: BltOperator,
    psi_diag: Vec<DVector<f64>>,
    h: Vec<DVector<f64>>,
    v: Vec<DVector<f64>>,
    w: Vec<DVector<f64>>,
    next: usize,
}

impl FeedbackPolicy {
    pub fn from_solution(sol: &SlsSolution) -> Result<Self> {
        // the solver may land a hair below the floor; anything at or near zero is unusable
        let floor = (sol.psi_min - 1e-9).max(f64::MIN_POSITIVE);
        if let Some((t, p)) = sol.psi_diag.iter().enumerate().find(|(_, p)| p.iter().any(|&v| !(v >= floor))) {
            return Err(Error::Policy(format!("disturbance filter entry at step {t} below floor: {}", p.min())));
        }
        Ok(Self {
            phi_x: sol.phi_x.clone(),
            phi_u: sol.phi_u.clone(),
            psi_diag: sol.psi_diag.clone(),
            h: sol.h.clone(),
            v: sol.v.clone(),
            w: Vec::with_capacity(sol.v.len()),
            next: 0,
        })
    }

    pub fn horizon(&self) -> usize {
        self.v.len()
    }

    /// Index of the next step the policy expects.
    pub fn next_step(&self) -> usize {
        self.next
    }

    fn record(&mut self, t: usize, x: &DVector<f64>) -> Result<()> {
        if t != self.next {
            return Err(Error::Policy(format!("step {t} requested, expected {}", self.next)));
        }
        if x.len() != self.h[0].len() {
            return Err(Error::Dimension(format!("state of length {}", x.len())));
        }
        if t == 0 {
            return Ok(());
        }
        let mut r = x - &self.h[t];
        for i in 1..t {
            r -= self.phi_x.block(t, i) * &self.w[i - 1];
        }
        let w = r.component_div(&self.psi_diag[t - 1]);
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("virtual disturbance at step {t}")));
        }
        self.w.push(w);
        Ok(())
    }

    /// Input for step `t` given the measured state `x_t`.
    pub fn apply(&mut self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        if t >= self.horizon() {
            return Err(Error::Policy(format!("step {t} beyond horizon {}", self.horizon())));
        }
        self.record(t, x)?;
        let mut u = self.v[t].clone();
        for i in 1..=t {
            u += self.phi_u.block(t, i) * &self.w[i - 1];
        }
        self.next += 1;
        Ok(u)
    }

    /// Records the terminal state so that all virtual disturbances are available.
    pub fn observe_terminal(&mut self, x: &DVector<f64>) -> Result<()> {
        let horizon = self.horizon();
        self.record(horizon, x)?;
        self.next += 1;
        Ok(())
    }

    /// `w̃_0, w̃_1, ...` recovered so far.
    pub fn virtual_disturbances(&self) -> &[DVector<f64>] {
        &self.w
    }

    pub fn reset(&mut self) {
        self.w.clear();
        self.next = 0;
    }
}
