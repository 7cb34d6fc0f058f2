//! The trust-region loop around the robust linear filter.
//!
//! Each iteration linearizes the network on ℓ∞ regions around a reference
//! trajectory, solves the synthesis program and, if some slack is still positive,
//! moves the reference to the closed-loop nominal rollout of the new policy and
//! grows the regions. The solution with the smallest maximum slack wins.

use std::io::Write;
use std::time::Instant;

use log::{debug, warn};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::crown::{bounds_along_trajectory, extract_uncertainty, TrustRegion, UncertaintyModel};
use crate::dynamics::LearnedModel;
use crate::error::{Error, Result};
use crate::sls::{
    assemble, FeedbackPolicy, Penalties, SlsProblem, SlsSolution, SoftPolytope, SolverSettings,
    DEFAULT_BACKOFF, DEFAULT_PSI_MIN, SLACK_ZERO_TOL,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub horizon: usize,
    pub iterations: usize,
    pub initial_radius: f64,
    pub growth: f64,
    pub penalties: Penalties,
    pub psi_min: f64,
    pub backoff: f64,
    /// Slack values at or below this are treated as zero.
    pub slack_tol: f64,
    /// Keep iterating after a certified solution instead of returning it at once.
    pub literal_loop: bool,
    pub solver: SolverSettings,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            horizon: 3,
            iterations: 5,
            initial_radius: 0.1,
            growth: 2.0,
            // cheap region slack lets the reference walk away from a bad primary plan
            penalties: Penalties { trust_region: 1e2, ..Penalties::default() },
            psi_min: DEFAULT_PSI_MIN,
            backoff: DEFAULT_BACKOFF,
            slack_tol: SLACK_ZERO_TOL,
            literal_loop: false,
            solver: SolverSettings::default(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.iterations == 0 {
            return Err(Error::Config("horizon and iteration count must be at least 1".into()));
        }
        if !(self.initial_radius > 0.0) || !self.initial_radius.is_finite() {
            return Err(Error::Config(format!("initial radius {} must be positive", self.initial_radius)));
        }
        if !(self.growth > 1.0) || !self.growth.is_finite() {
            return Err(Error::Config(format!("growth factor {} must exceed 1", self.growth)));
        }
        if !(self.slack_tol >= 0.0) {
            return Err(Error::Config("slack tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

/// What happened in one iteration of the loop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    pub radius: f64,
    /// `None` when the solve failed.
    pub max_slack: Option<f64>,
    pub objective: Option<f64>,
    pub status: String,
    pub solve_ms: f64,
}

/// The winning iteration: its regions, linear model, program solution and policy.
#[derive(Debug, Clone)]
pub struct Certificate {
    pub iteration: usize,
    pub regions: Vec<TrustRegion>,
    pub model: UncertaintyModel,
    pub solution: SlsSolution,
    pub policy: FeedbackPolicy,
}

#[derive(Debug, Clone)]
pub struct FilterResult {
    /// Filtered input `u_0* = v_0` of the winning solution.
    pub u0: DVector<f64>,
    pub certified: bool,
    /// Smallest maximum slack over all iterations (zero when certified).
    pub best_slack: f64,
    pub iterations: Vec<IterationDiagnostics>,
    pub winner: Certificate,
}

/// Disturbance-free rollout `x̂_{t+1} = A x̂_t + B û_t + f(x̂_t, û_t)`.
pub fn rollout_nominal(model: &LearnedModel, x0: &DVector<f64>, controls: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0.clone());
    for (t, u) in controls.iter().enumerate() {
        let next = model.step(&states[t], u)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: t + 1 });
        }
        states.push(next);
    }
    Ok(states)
}

/// Closed-loop nominal rollout under `policy`; returns `(x_0..x_T, u_0..u_{T-1})`.
pub fn rollout_policy(
    model: &LearnedModel,
    x0: &DVector<f64>,
    policy: &mut FeedbackPolicy,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    policy.reset();
    let horizon = policy.horizon();
    let mut states = vec![x0.clone()];
    let mut controls = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let u = policy.apply(t, &states[t])?;
        let next = model.step(&states[t], &u)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: t + 1 });
        }
        controls.push(u);
        states.push(next);
    }
    policy.observe_terminal(&states[horizon])?;
    policy.reset();
    Ok((states, controls))
}

/// Regions centred on `(x̂_t, û_t)` for `t ∈ [0, T-1]`.
fn trust_regions(states: &[DVector<f64>], controls: &[DVector<f64>], radius: f64) -> Result<Vec<TrustRegion>> {
    controls
        .iter()
        .zip(states)
        .map(|(u, x)| TrustRegion::new(LearnedModel::stack(x, u), radius))
        .collect()
}

/// Robust filter around a learned model with state set `X` and input set `U`.
#[derive(Debug, Clone)]
pub struct SafetyFilter {
    pub model: LearnedModel,
    pub state_set: SoftPolytope,
    pub input_set: SoftPolytope,
    pub sigma_w: f64,
    pub config: FilterConfig,
}

impl SafetyFilter {
    pub fn new(
        model: LearnedModel,
        state_set: SoftPolytope,
        input_set: SoftPolytope,
        sigma_w: f64,
        config: FilterConfig,
    ) -> Result<Self> {
        config.validate()?;
        if state_set.dim() != model.nx() || input_set.dim() != model.nu() {
            return Err(Error::Dimension("constraint sets do not match the model".into()));
        }
        if !(sigma_w >= 0.0) || !sigma_w.is_finite() {
            return Err(Error::Config(format!("sigma_w must be non-negative, got {sigma_w}")));
        }
        Ok(Self { model, state_set, input_set, sigma_w, config })
    }

    /// Builds the synthesis problem linearized on `regions`.
    pub fn problem(&self, x0: &DVector<f64>, u_ref: &DVector<f64>, regions: &[TrustRegion]) -> Result<SlsProblem> {
        let bounds = bounds_along_trajectory(&self.model.net, regions)?;
        let model = extract_uncertainty(&self.model.a, &self.model.b, &bounds, self.sigma_w)?;
        let mut problem = SlsProblem::new(
            model,
            self.state_set.clone(),
            self.input_set.clone(),
            regions.to_vec(),
            x0.clone(),
            u_ref.clone(),
        );
        problem.penalties = self.config.penalties;
        problem.psi_min = self.config.psi_min;
        problem.backoff = self.config.backoff;
        Ok(problem)
    }

    fn attempt(&self, x0: &DVector<f64>, u_ref: &DVector<f64>, regions: &[TrustRegion]) -> Result<(UncertaintyModel, SlsSolution, FeedbackPolicy)> {
        let problem = self.problem(x0, u_ref, regions)?;
        let solution = assemble(&problem)?.solve(&self.config.solver)?;
        let policy = FeedbackPolicy::from_solution(&solution)?;
        Ok((problem.model, solution, policy))
    }

    /// One filter call at state `x` with primary input `u_ref` and the primary
    /// controller's planned inputs used to seed the reference trajectory.
    pub fn filter_step(&self, x: &DVector<f64>, u_ref: &DVector<f64>, init_controls: &[DVector<f64>]) -> Result<FilterResult> {
        let horizon = self.config.horizon;
        if init_controls.len() < horizon {
            return Err(Error::Dimension(format!(
                "{} planned inputs for a filter horizon of {horizon}",
                init_controls.len()
            )));
        }
        if x.len() != self.model.nx() || u_ref.len() != self.model.nu() {
            return Err(Error::Dimension("state or reference input length".into()));
        }
        let mut controls = init_controls[..horizon].to_vec();
        let mut states = rollout_nominal(&self.model, x, &controls)?;
        let mut radius = self.config.initial_radius;
        let mut best_slack = f64::INFINITY;
        let mut winner: Option<Certificate> = None;
        let mut diagnostics = Vec::with_capacity(self.config.iterations);
        let mut failures = Vec::new();

        for iteration in 1..=self.config.iterations {
            let regions = trust_regions(&states, &controls, radius)?;
            let start = Instant::now();
            let outcome = self.attempt(x, u_ref, &regions);
            let solve_ms = start.elapsed().as_secs_f64() * 1e3;
            let (model, solution, mut policy) = match outcome {
                Ok(found) => found,
                Err(e) => {
                    warn!("filter iteration {iteration} at radius {radius} failed: {e}");
                    diagnostics.push(IterationDiagnostics {
                        iteration,
                        radius,
                        max_slack: None,
                        objective: None,
                        status: e.to_string(),
                        solve_ms,
                    });
                    failures.push(e.to_string());
                    radius *= self.config.growth;
                    continue;
                }
            };
            let raw_slack = solution.slacks().fold(0.0, f64::max);
            let slack = if raw_slack <= self.config.slack_tol { 0.0 } else { raw_slack };
            if log::log_enabled!(log::Level::Debug) {
                let group = |v: &[DVector<f64>]| v.iter().flat_map(|s| s.iter().copied()).fold(0.0, f64::max);
                debug!(
                    "filter iteration {iteration}: radius {radius}, max slack {raw_slack:.3e} (state {:.2e}, input {:.2e}, region {:.2e}/{:.2e})",
                    group(&solution.eps_x),
                    group(&solution.eps_u),
                    group(&solution.sig_x),
                    group(&solution.sig_u)
                );
                log::trace!("state slack {:?}, nominal inputs {:?}, nominal states {:?}", solution.eps_x, solution.v, solution.h);
            }
            diagnostics.push(IterationDiagnostics {
                iteration,
                radius,
                max_slack: Some(slack),
                objective: Some(solution.objective),
                status: solution.status.clone(),
                solve_ms,
            });

            let (next_states, next_controls) = rollout_policy(&self.model, x, &mut policy)?;
            if slack <= best_slack {
                best_slack = slack;
                winner = Some(Certificate { iteration, regions, model, solution, policy });
            }
            if slack == 0.0 && !self.config.literal_loop {
                break;
            }
            states = next_states;
            controls = next_controls;
            radius *= self.config.growth;
        }

        let winner = winner.ok_or_else(|| Error::AllIterationsFailed(failures.join("; ")))?;
        Ok(FilterResult {
            u0: winner.solution.first_input().clone(),
            certified: best_slack == 0.0,
            best_slack,
            iterations: diagnostics,
            winner,
        })
    }
}

/// Diagnostics as CSV rows `k,iteration,radius,max_slack,objective,solve_ms,certificate`,
/// one per iteration of every filter call `(k, iterations, certified)`.
pub fn write_diagnostics_csv<'a, W: Write>(
    writer: W,
    calls: impl IntoIterator<Item = (usize, &'a [IterationDiagnostics], bool)>,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["k", "iteration", "radius", "max_slack", "objective", "solve_ms", "certificate"])?;
    let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| v.to_string());
    for (k, iterations, certified) in calls {
        for d in iterations {
            out.write_record(&[
                k.to_string(),
                d.iteration.to_string(),
                d.radius.to_string(),
                opt(d.max_slack),
                opt(d.objective),
                format!("{:.3}", d.solve_ms),
                certified.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}
