#![allow(dead_code)]

use nalgebra::DVector;
use nnpsf::crown::TrustRegion;
use nnpsf::pendulum::{default_model, BenchConfig};
use nnpsf::psf::{rollout_nominal, SafetyFilter};
use nnpsf::sls::{FeedbackPolicy, SlsProblem};
use nnpsf::LearnedModel;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A filter program at a random pendulum state, linearized around a random open-loop plan.
pub struct Instance {
    pub filter: SafetyFilter,
    pub x0: DVector<f64>,
    pub u_ref: DVector<f64>,
    pub plan: Vec<DVector<f64>>,
    pub regions: Vec<TrustRegion>,
    pub problem: SlsProblem,
}

pub fn pendulum_filter(sigma_w: f64) -> SafetyFilter {
    let config = BenchConfig::default();
    SafetyFilter::new(default_model(), config.state_set().unwrap(), config.input_set().unwrap(), sigma_w, config.filter)
        .unwrap()
}

pub fn random_instance(rng: &mut ChaCha8Rng, sigma_w: f64) -> Instance {
    let filter = pendulum_filter(sigma_w);
    let horizon = filter.config.horizon;
    let x0 = DVector::from_vec(vec![rng.random_range(-2.5..2.5), rng.random_range(-1.5..1.5)]);
    let plan: Vec<_> = (0..horizon).map(|_| DVector::from_element(1, rng.random_range(-10.0..10.0))).collect();
    let states = rollout_nominal(&filter.model, &x0, &plan).unwrap();
    let radius = rng.random_range(0.05..0.4);
    let regions: Vec<_> = (0..horizon)
        .map(|t| TrustRegion::new(LearnedModel::stack(&states[t], &plan[t]), radius).unwrap())
        .collect();
    let u_ref = DVector::from_element(1, rng.random_range(-15.0..15.0));
    let problem = filter.problem(&x0, &u_ref, &regions).unwrap();
    Instance { filter, x0, u_ref, plan, regions, problem }
}

pub fn uniform_noise(rng: &mut ChaCha8Rng, n: usize, sigma_w: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| if sigma_w > 0.0 { rng.random_range(-sigma_w..=sigma_w) } else { 0.0 })
}

/// Closed loop of `x⁺ = A x + B u + f(x, u) + w` under `policy`.
/// Returns `(x_0..x_T, u_0..u_{T-1})`.
pub fn noisy_rollout(
    model: &LearnedModel,
    x0: &DVector<f64>,
    policy: &mut FeedbackPolicy,
    sigma_w: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    policy.reset();
    let mut xs = vec![x0.clone()];
    let mut us = Vec::new();
    for t in 0..policy.horizon() {
        let u = policy.apply(t, &xs[t]).unwrap();
        let next = model.step(&xs[t], &u).unwrap() + uniform_noise(rng, x0.len(), sigma_w);
        us.push(u);
        xs.push(next);
    }
    policy.observe_terminal(xs.last().unwrap()).unwrap();
    (xs, us)
}
