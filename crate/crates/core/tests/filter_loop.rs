mod common;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use nnpsf::network::DenseLayer;
use nnpsf::psf::{rollout_policy, write_diagnostics_csv, FilterConfig, SafetyFilter};
use nnpsf::sls::SoftPolytope;
use nnpsf::{LearnedModel, MlpNetwork};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::noisy_rollout;

fn double_integrator(net: MlpNetwork) -> LearnedModel {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.005, 0.1]);
    LearnedModel::new(a, b, Arc::new(net)).unwrap()
}

fn boxes(x: [f64; 2], u: f64) -> (SoftPolytope, SoftPolytope) {
    (SoftPolytope::symmetric_box(&x).unwrap(), SoftPolytope::symmetric_box(&[u]).unwrap())
}

fn plan(u: f64, horizon: usize) -> Vec<DVector<f64>> {
    vec![DVector::from_element(1, u); horizon]
}

#[test]
fn safe_reference_passes_through_at_the_first_iteration() {
    let model = double_integrator(MlpNetwork::zero(3, 2));
    let (xs, us) = boxes([5.0, 2.0], 1.0);
    let config = FilterConfig { horizon: 8, ..FilterConfig::default() };
    let filter = SafetyFilter::new(model, xs, us, 0.0, config).unwrap();
    let u_ref = DVector::from_element(1, 0.3);
    let out = filter.filter_step(&DVector::from_vec(vec![0.0, 0.2]), &u_ref, &plan(0.3, 8)).unwrap();
    assert!(out.certified);
    assert_eq!(out.best_slack, 0.0);
    assert_eq!(out.iterations.len(), 1);
    assert_eq!(out.winner.iteration, 1);
    assert!((&out.u0 - &u_ref).amax() < 1e-6, "u0 = {}", out.u0[0]);
}

#[test]
fn unsafe_reference_is_modified_and_the_policy_is_safe() {
    let model = double_integrator(MlpNetwork::zero(3, 2));
    let (xs, us) = boxes([1.0, 2.0], 1.0);
    let sigma = 0.01;
    let config = FilterConfig { horizon: 10, ..FilterConfig::default() };
    let filter = SafetyFilter::new(model.clone(), xs.clone(), us.clone(), sigma, config).unwrap();
    // heading for the wall at full speed and still pushing
    let x0 = DVector::from_vec(vec![0.2, 1.0]);
    let u_ref = DVector::from_element(1, 1.0);
    let out = filter.filter_step(&x0, &u_ref, &plan(1.0, 10)).unwrap();
    assert!(out.certified, "best slack {}", out.best_slack);
    assert!(out.u0[0] < 0.0, "the filter must brake, got {}", out.u0[0]);
    let mut policy = out.winner.policy.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let (states, inputs) = noisy_rollout(&model, &x0, &mut policy, sigma, &mut rng);
        assert!(states.iter().all(|x| xs.contains(x, 1e-9)));
        assert!(inputs.iter().all(|u| us.contains(u, 1e-9)));
    }
}

// x⁺ = x + u + 4·relu(x) + w in one dimension: the relaxation of the kink
// and the disturbance alone already overflow the corridor |x| ≤ 0.05.
fn corridor() -> (SafetyFilter, DVector<f64>) {
    let hidden = DenseLayer::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), DVector::zeros(1)).unwrap();
    let out = DenseLayer::new(DMatrix::from_element(1, 1, 4.0), DVector::zeros(1)).unwrap();
    let net = MlpNetwork::new(vec![hidden, out]).unwrap();
    let one = DMatrix::from_element(1, 1, 1.0);
    let model = LearnedModel::new(one.clone(), one, Arc::new(net)).unwrap();
    let xs = SoftPolytope::symmetric_box(&[0.05]).unwrap();
    let us = SoftPolytope::symmetric_box(&[1.0]).unwrap();
    let config = FilterConfig { horizon: 4, iterations: 4, ..FilterConfig::default() };
    (SafetyFilter::new(model, xs, us, 0.2, config).unwrap(), DVector::zeros(1))
}

#[test]
fn corridor_cannot_be_certified() {
    let (filter, x0) = corridor();
    let out = filter.filter_step(&x0, &DVector::zeros(1), &plan(0.0, 4)).unwrap();
    assert!(!out.certified);
    assert!(out.best_slack > 0.0);
    let slacks: Vec<f64> = out.iterations.iter().filter_map(|d| d.max_slack).collect();
    assert_eq!(slacks.len(), 4);
    let smallest = slacks.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_slack, smallest);
    // ties go to the later iteration
    let last_best = slacks.iter().rposition(|s| *s == smallest).unwrap() + 1;
    assert_eq!(out.winner.iteration, last_best);
    assert_eq!(&out.u0, out.winner.solution.first_input());
}

#[test]
fn literal_loop_runs_every_iteration() {
    let model = double_integrator(MlpNetwork::zero(3, 2));
    let (xs, us) = boxes([5.0, 2.0], 1.0);
    let config = FilterConfig { horizon: 5, literal_loop: true, ..FilterConfig::default() };
    let filter = SafetyFilter::new(model, xs, us, 0.0, config).unwrap();
    let u_ref = DVector::from_element(1, 0.3);
    let out = filter.filter_step(&DVector::zeros(2), &u_ref, &plan(0.3, 5)).unwrap();
    assert_eq!(out.iterations.len(), config.iterations);
    assert!(out.certified);
    assert_eq!(out.best_slack, 0.0);
    assert!((&out.u0 - &u_ref).amax() < 1e-6);
    let radii: Vec<f64> = out.iterations.iter().map(|d| d.radius).collect();
    assert!(radii.windows(2).all(|w| (w[1] - config.growth * w[0]).abs() < 1e-12));
}

#[test]
fn pendulum_certificate_matches_its_policy() {
    let filter = common::pendulum_filter(0.05);
    let x0 = DVector::from_vec(vec![0.3, -0.2]);
    let u_ref = DVector::from_element(1, -1.0);
    let out = filter.filter_step(&x0, &u_ref, &plan(-1.0, filter.config.horizon)).unwrap();
    assert!(out.certified);
    let mut policy = out.winner.policy.clone();
    let (states, inputs) = rollout_policy(&filter.model, &x0, &mut policy).unwrap();
    assert_eq!(&inputs[0], &out.u0);
    assert_eq!(states.len(), filter.config.horizon + 1);
    assert!(out.winner.solution.affine_residual() <= 1e-6);
}

#[test]
fn mismatched_plan_is_rejected() {
    let filter = common::pendulum_filter(0.05);
    let short = plan(0.0, filter.config.horizon - 1);
    assert!(filter.filter_step(&DVector::zeros(2), &DVector::zeros(1), &short).is_err());
    assert!(filter.filter_step(&DVector::zeros(3), &DVector::zeros(1), &plan(0.0, 9)).is_err());
}

#[test]
fn diagnostics_csv_has_one_row_per_iteration() {
    let (filter, x0) = corridor();
    let out = filter.filter_step(&x0, &DVector::zeros(1), &plan(0.0, 4)).unwrap();
    let mut buf = Vec::new();
    write_diagnostics_csv(&mut buf, [(0, out.iterations.as_slice(), out.certified), (1, out.iterations.as_slice(), false)]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * out.iterations.len());
    assert!(text.starts_with("k,iteration,radius,max_slack,objective,solve_ms,certificate"));
}
