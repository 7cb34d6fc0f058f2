use nalgebra::{DMatrix, DVector};
use nnpsf::pendulum::{
    default_model, default_network, export_dataset, linearized_plant, run_benchmark, run_case, write_table_csv, BenchConfig,
    ExcitationConfig, PendulumParams, Scheme, TestCase,
};
use nnpsf::MlpNetwork;

#[test]
fn plant_matrices_are_the_published_constants() {
    let (a, b) = linearized_plant();
    assert_eq!(a, DMatrix::from_row_slice(2, 2, &[1.0092, 0.05015, 0.369, 1.0092]));
    assert_eq!(b, DMatrix::from_row_slice(2, 1, &[0.00125, 0.05015]));
    assert!(b.column(0).norm() > 0.0);
}

// Zero-order-hold discretization through the exponential of the augmented matrix.
#[test]
fn constants_match_the_exact_discretization_to_printed_precision() {
    let p = PendulumParams::default();
    let (ac, bc) = p.continuous_linearization();
    let mut aug = DMatrix::zeros(3, 3);
    aug.view_mut((0, 0), (2, 2)).copy_from(&(&ac * p.dt));
    aug.view_mut((0, 2), (2, 1)).copy_from(&(&bc * p.dt));
    let e = aug.exp();
    let (a, b) = linearized_plant();
    // the published entries carry 4 or 5 decimals; half a unit of the last digit
    let printed = [(a[(0, 0)], e[(0, 0)], 4), (a[(0, 1)], e[(0, 1)], 5), (a[(1, 0)], e[(1, 0)], 3), (a[(1, 1)], e[(1, 1)], 4), (b[0], e[(0, 2)], 5), (b[1], e[(1, 2)], 5)];
    for (published, exact, decimals) in printed {
        let tol = 0.5 * 10f64.powi(-decimals);
        assert!((published - exact).abs() <= tol, "{published} vs {exact:.7}");
    }
}

// Full swings through the hanging position drift by up to ~3e-6 relative per step
// at this step size, so the bound here is 1e-5.
#[test]
fn unforced_energy_is_conserved_per_step() {
    let p = PendulumParams::default();
    let zero = DVector::zeros(1);
    for start in [[0.3, 0.0], [-1.0, 0.5], [2.0, -1.0], [3.0, 0.2]] {
        let mut x = DVector::from_row_slice(&start);
        for _ in 0..40 {
            let next = p.step_exact(&x, &zero);
            let (e0, e1) = (p.energy(&x), p.energy(&next));
            assert!((e1 - e0).abs() <= 1e-5 * e0.abs().max(1.0), "{e0} → {e1}");
            x = next;
        }
    }
}

#[test]
fn integrator_is_fourth_order() {
    let x = DVector::from_vec(vec![2.0, 3.0]);
    let zero = DVector::zeros(1);
    let over_one_period = |substeps: usize| {
        let p = PendulumParams { dt: 0.05 / substeps as f64, ..PendulumParams::default() };
        (0..substeps).fold(x.clone(), |y, _| p.step_exact(&y, &zero))
    };
    let reference = over_one_period(512);
    let errors: Vec<f64> = [2, 4, 8].iter().map(|&n| (over_one_period(n) - &reference).amax()).collect();
    for pair in errors.windows(2) {
        let ratio = pair[0] / pair[1];
        assert!(ratio > 12.0 && ratio < 20.0, "halving ratio {ratio}");
    }
}

#[test]
fn bundled_network_fits_the_plant_residual() {
    let model = default_model();
    let p = PendulumParams::default();
    let mut worst = 0.0_f64;
    for i in 0..50 {
        let th = -3.0 + 0.12 * i as f64;
        let om = 2.0 * (0.7 * i as f64).sin();
        let tau = 10.0 * (1.3 * i as f64).cos();
        let (x, u) = (DVector::from_vec(vec![th, om]), DVector::from_element(1, tau));
        worst = worst.max((model.step(&x, &u).unwrap() - p.step_exact(&x, &u)).amax());
    }
    assert!(worst < 1e-2, "worst one-step model error {worst}");
    let net = default_network();
    let reloaded = MlpNetwork::from_json_str(&serde_json::to_string(&net.to_weight_file()).unwrap()).unwrap();
    assert_eq!(net, reloaded);
}

#[test]
fn runs_are_a_function_of_the_seed() {
    let model = default_model();
    let config = BenchConfig::default();
    let case = TestCase::by_id(4).unwrap();
    let first = run_case(&model, &case, Scheme::SafeIlqr, 0.1, 7, &config).unwrap();
    let again = run_case(&model, &case, Scheme::SafeIlqr, 0.1, 7, &config).unwrap();
    let other = run_case(&model, &case, Scheme::SafeIlqr, 0.1, 8, &config).unwrap();
    assert_eq!(first.states, again.states);
    assert_eq!(first.steps.iter().map(|s| s.u).collect::<Vec<_>>(), again.steps.iter().map(|s| s.u).collect::<Vec<_>>());
    assert_ne!(first.states, other.states);
    assert_eq!(first.states.len(), case.steps(config.params.dt) + 1);
}

#[test]
fn trajectory_csv_layout() {
    let model = default_model();
    let config = BenchConfig::default();
    let log = run_case(&model, &TestCase::by_id(1).unwrap(), Scheme::Ilqr, 0.05, 0, &config).unwrap();
    let mut buf = Vec::new();
    log.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "k,theta,theta_dot,u_ref,u,cert,max_slack");
    assert_eq!(lines.count(), 41);
    assert!(log.steps.iter().all(|s| s.certified.is_none() && s.u == s.u_ref));
}

#[test]
fn unfiltered_tracking_leaves_the_state_set() {
    let model = default_model();
    let config = BenchConfig::default();
    let state_set = config.state_set().unwrap();
    let log = run_case(&model, &TestCase::by_id(1).unwrap(), Scheme::Ilqr, 0.05, 0, &config).unwrap();
    assert!(log.violation_pct(&state_set) > 0.0);
}

#[test]
fn table_averages_over_seeds() {
    let model = default_model();
    let config = BenchConfig { sigmas: vec![0.05], seeds: vec![0, 1], ..BenchConfig::default() };
    let rows = run_benchmark(&model, &config).unwrap();
    assert_eq!(rows.len(), Scheme::ALL.len() * 4 * 2);
    let mut buf = Vec::new();
    write_table_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "scheme,sigma_w,case,violation_pct");
    assert_eq!(text.lines().count(), 1 + Scheme::ALL.len() * 4);
    let pick = |seed| rows.iter().find(|r| r.scheme == Scheme::Ilqr && r.case == 1 && r.seed == seed).unwrap().violation_pct;
    let expected = format!("ilqr,0.05,1,{:.2}", (pick(0) + pick(1)) / 2.0);
    assert!(text.lines().any(|l| l == expected), "missing {expected}");
}

#[test]
fn dataset_rows_and_reload() {
    let params = PendulumParams::default();
    let exc = ExcitationConfig::default();
    let mut first = Vec::new();
    let rows = export_dataset(&mut first, &params, &exc, 15.0, 3).unwrap();
    assert_eq!(rows, 300);
    let mut second = Vec::new();
    export_dataset(&mut second, &params, &exc, 15.0, 3).unwrap();
    assert_eq!(first, second);

    let (a, b) = linearized_plant();
    let mut reader = csv::Reader::from_reader(first.as_slice());
    let mut count = 0;
    for record in reader.records() {
        let r: Vec<f64> = record.unwrap().iter().map(|v| v.parse().unwrap()).collect();
        let (x, u) = (DVector::from_vec(vec![r[0], r[1]]), DVector::from_element(1, r[2]));
        let residual = params.step_exact(&x, &u) - &a * &x - &b * &u;
        assert!((residual[0] - r[3]).abs() < 1e-12 && (residual[1] - r[4]).abs() < 1e-12);
        assert!(r[2].abs() <= exc.torque_bound);
        count += 1;
    }
    assert_eq!(count, rows);
}

#[test]
fn residual_vanishes_at_the_origin() {
    let params = PendulumParams::default();
    let (a, b) = linearized_plant();
    let (x, u) = (DVector::from_vec(vec![1e-4, -1e-4]), DVector::zeros(1));
    let residual = params.step_exact(&x, &u) - &a * &x - &b * &u;
    assert!(residual.amax() < 1e-7);
}
