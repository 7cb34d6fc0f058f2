//! Robust synthesis over system responses.
//!
//! Given a linear time-varying model with a symmetric residual envelope
//! ([`UncertaintyModel`]), [`assemble`] builds a soft-constrained quadratic program
//! whose decision variables are the causal responses `Φx`, `Φu`, the virtual
//! disturbance filter `Ψ`, the nominal trajectory `(h, v)` and slack variables.
//! A solution with all slacks at zero certifies that the feedback policy
//! `u = K(x − h) + v`, realized by [`FeedbackPolicy`], keeps the system inside the
//! state, input and trust-region constraints over the horizon for every admissible
//! residual and disturbance.

mod assemble;
mod blt;
mod policy;
mod qp;
mod solution;

pub use assemble::{assemble, SlsLayout, SlsQp};
pub use blt::BltOperator;
pub use policy::FeedbackPolicy;
pub use qp::{LinExpr, LinearRow, QpSolution, QuadraticProgram, SolverSettings};
pub use solution::{max_slack, SlsSolution, SLACK_ZERO_TOL};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::crown::{TrustRegion, UncertaintyModel};
use crate::error::{Error, Result};

/// Polytope `{ y | F y ≤ b }` whose rows are enforced softly.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPolytope {
    pub f: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl SoftPolytope {
    pub fn new(f: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if f.nrows() == 0 || f.nrows() != b.len() {
            return Err(Error::Dimension(format!("polytope with {} rows and {} offsets", f.nrows(), b.len())));
        }
        if f.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("polytope".into()));
        }
        Ok(Self { f, b })
    }

    /// Axis-aligned box `lower ≤ y ≤ upper`; rows are `+e_k` for every `k`, then `-e_k`.
    pub fn from_box(lower: &DVector<f64>, upper: &DVector<f64>) -> Result<Self> {
        let n = lower.len();
        if upper.len() != n {
            return Err(Error::Dimension("box bounds of different lengths".into()));
        }
        let mut f = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for k in 0..n {
            f[(k, k)] = 1.0;
            b[k] = upper[k];
            f[(n + k, k)] = -1.0;
            b[n + k] = -lower[k];
        }
        Self::new(f, b)
    }

    /// Symmetric box `|y_k| ≤ half_width[k]`.
    pub fn symmetric_box(half_width: &[f64]) -> Result<Self> {
        let upper = DVector::from_column_slice(half_width);
        Self::from_box(&(-&upper), &upper)
    }

    /// The ℓ∞ ball of a trust region as `2 n` rows.
    pub fn from_trust_region(region: &TrustRegion) -> Result<Self> {
        let r = DVector::from_element(region.center.len(), region.radius);
        Self::from_box(&(&region.center - &r), &(&region.center + &r))
    }

    pub fn dim(&self) -> usize {
        self.f.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.f.nrows()
    }

    pub fn contains(&self, y: &DVector<f64>, tol: f64) -> bool {
        (&self.f * y - &self.b).iter().all(|&v| v <= tol)
    }

    /// Largest row violation `max_j (a_jᵀy − b_j)`, negative inside.
    pub fn max_violation(&self, y: &DVector<f64>) -> f64 {
        (&self.f * y - &self.b).max()
    }
}

/// Objective weights on the slack variables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Penalties {
    /// Weight on state and input slacks.
    pub constraint: f64,
    /// Weight on trust-region slacks.
    pub trust_region: f64,
}

impl Default for Penalties {
    fn default() -> Self {
        Self { constraint: 1e4, trust_region: 1e3 }
    }
}

pub const DEFAULT_PSI_MIN: f64 = 1e-6;
pub const DEFAULT_BACKOFF: f64 = 1e-7;

/// One instance of the robust linear filter problem at a given state.
#[derive(Debug, Clone)]
pub struct SlsProblem {
    pub model: UncertaintyModel,
    pub state_set: SoftPolytope,
    pub input_set: SoftPolytope,
    /// One region per step `t ∈ [0, T-1]`, over the stacked `(x, u)`.
    pub trust_regions: Vec<TrustRegion>,
    pub x0: DVector<f64>,
    pub u_ref: DVector<f64>,
    pub penalties: Penalties,
    /// Floor on the diagonal of the disturbance filter.
    pub psi_min: f64,
    /// Every tightened inequality is strengthened by this amount so that solver
    /// round-off cannot produce a certified point that is infeasible in exact arithmetic.
    pub backoff: f64,
}

impl SlsProblem {
    pub fn new(
        model: UncertaintyModel,
        state_set: SoftPolytope,
        input_set: SoftPolytope,
        trust_regions: Vec<TrustRegion>,
        x0: DVector<f64>,
        u_ref: DVector<f64>,
    ) -> Self {
        Self {
            model,
            state_set,
            input_set,
            trust_regions,
            x0,
            u_ref,
            penalties: Penalties::default(),
            psi_min: DEFAULT_PSI_MIN,
            backoff: DEFAULT_BACKOFF,
        }
    }

    pub fn horizon(&self) -> usize {
        self.model.horizon()
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, nu, horizon) = (self.model.nx(), self.model.nu(), self.horizon());
        if self.state_set.dim() != nx || self.input_set.dim() != nu {
            return Err(Error::Dimension("constraint sets do not match the model".into()));
        }
        if self.trust_regions.len() != horizon {
            return Err(Error::Dimension(format!(
                "{} trust regions for a horizon of {horizon}",
                self.trust_regions.len()
            )));
        }
        if self.trust_regions.iter().any(|r| r.center.len() != nx + nu) {
            return Err(Error::Dimension("trust region dimension".into()));
        }
        if self.x0.len() != nx || self.u_ref.len() != nu {
            return Err(Error::Dimension("initial state or reference input".into()));
        }
        if self.x0.iter().chain(self.u_ref.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial state or reference input".into()));
        }
        let finite_model = self.model.steps.iter().all(|s| {
            s.a.iter()
                .chain(s.b.iter())
                .chain(s.c.iter())
                .chain(s.gain_upper.iter())
                .chain(s.gain_lower.iter())
                .chain(s.offset_upper.iter())
                .chain(s.offset_lower.iter())
                .all(|v| v.is_finite())
        });
        if !finite_model {
            return Err(Error::NonFinite("uncertainty model".into()));
        }
        if !(self.psi_min > 0.0) || !(self.backoff >= 0.0) {
            return Err(Error::Config("psi_min must be positive and backoff non-negative".into()));
        }
        if !(self.penalties.constraint > 0.0) || !(self.penalties.trust_region > 0.0) {
            return Err(Error::Config("slack penalties must be positive".into()));
        }
        Ok(())
    }
}
