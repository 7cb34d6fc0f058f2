//! Inverted pendulum benchmark: the ground-truth plant, its discrete
//! linearization, the four test scenarios and the closed-loop runs of the four
//! control schemes.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::LearnedModel;
use crate::error::{Error, Result};
use crate::ilqr::{IlqrSpec, PrimaryController};
use crate::network::MlpNetwork;
use crate::psf::{write_diagnostics_csv, FilterConfig, IterationDiagnostics, SafetyFilter};
use crate::sls::SoftPolytope;

const DEFAULT_WEIGHTS: &str = include_str!("../assets/pendulum_residual.json");

/// Residual network shipped with the crate, trained on one-step residuals of the
/// plant against [`linearized_plant`].
pub fn default_network() -> MlpNetwork {
    MlpNetwork::from_json_str(DEFAULT_WEIGHTS).expect("bundled weight file is valid")
}

pub fn default_model() -> LearnedModel {
    let (a, b) = linearized_plant();
    LearnedModel::new(a, b, Arc::new(default_network())).expect("bundled network matches the plant")
}

/// Discrete linearization about the upright equilibrium at `dt = 0.05`.
pub fn linearized_plant() -> (DMatrix<f64>, DMatrix<f64>) {
    (
        DMatrix::from_row_slice(2, 2, &[1.0092, 0.05015, 0.369, 1.0092]),
        DMatrix::from_row_slice(2, 1, &[0.00125, 0.05015]),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub dt: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self { mass: 0.75, length: 2.0, gravity: 9.81, dt: 0.05 }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        if [self.mass, self.length, self.gravity, self.dt].iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("pendulum parameters must be positive".into()))
        }
    }

    /// `3g / 2l`.
    pub fn gravity_gain(&self) -> f64 {
        3.0 * self.gravity / (2.0 * self.length)
    }

    /// `3 / (m l²)`.
    pub fn torque_gain(&self) -> f64 {
        3.0 / (self.mass * self.length * self.length)
    }

    fn derivative(&self, theta: f64, omega: f64, torque: f64) -> (f64, f64) {
        (omega, self.gravity_gain() * theta.sin() + self.torque_gain() * torque)
    }

    /// One RK4 step with the torque held over `dt`.
    pub fn step_exact(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let (th, om, tau) = (x[0], x[1], u[0]);
        let h = self.dt;
        let k1 = self.derivative(th, om, tau);
        let k2 = self.derivative(th + 0.5 * h * k1.0, om + 0.5 * h * k1.1, tau);
        let k3 = self.derivative(th + 0.5 * h * k2.0, om + 0.5 * h * k2.1, tau);
        let k4 = self.derivative(th + h * k3.0, om + h * k3.1, tau);
        DVector::from_vec(vec![
            th + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
            om + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
        ])
    }

    /// RK4 step plus noise drawn uniformly from `[-σ_w, σ_w]²`.
    pub fn step_true<R: Rng + ?Sized>(&self, x: &DVector<f64>, u: &DVector<f64>, sigma_w: f64, rng: &mut R) -> DVector<f64> {
        let mut next = self.step_exact(x, u);
        if sigma_w > 0.0 {
            for v in next.iter_mut() {
                *v += rng.random_range(-sigma_w..=sigma_w);
            }
        }
        next
    }

    /// `½θ̇² + (3g/2l) cos θ`, conserved by the unforced continuous dynamics.
    pub fn energy(&self, x: &DVector<f64>) -> f64 {
        0.5 * x[1] * x[1] + self.gravity_gain() * x[0].cos()
    }

    /// Continuous-time linearization `(A_c, B_c)` at the upright equilibrium.
    pub fn continuous_linearization(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        (
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, self.gravity_gain(), 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, self.torque_gain()]),
        )
    }
}

/// One row of the scenario table (angles in degrees).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestCase {
    pub id: usize,
    pub x0_deg: [f64; 2],
    pub theta_r1_deg: f64,
    pub theta_r2_deg: f64,
    pub duration: f64,
}

pub const TEST_CASES: [TestCase; 4] = [
    TestCase { id: 1, x0_deg: [57.3, -120.3], theta_r1_deg: 120.0, theta_r2_deg: -50.0, duration: 2.0 },
    TestCase { id: 2, x0_deg: [-85.9, -85.9], theta_r1_deg: -150.0, theta_r2_deg: 40.0, duration: 2.0 },
    TestCase { id: 3, x0_deg: [-85.9, -114.6], theta_r1_deg: -100.0, theta_r2_deg: -180.0, duration: 2.0 },
    TestCase { id: 4, x0_deg: [85.9, 57.3], theta_r1_deg: 100.0, theta_r2_deg: 180.0, duration: 2.0 },
];

impl TestCase {
    pub fn by_id(id: usize) -> Result<Self> {
        TEST_CASES
            .iter()
            .find(|c| c.id == id)
            .copied()
            .ok_or_else(|| Error::Config(format!("no test case {id}; expected 1-4")))
    }

    pub fn x0(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.x0_deg[0].to_radians(), self.x0_deg[1].to_radians()])
    }

    pub fn steps(&self, dt: f64) -> usize {
        (self.duration / dt).round() as usize
    }

    /// Reference angle in radians at time `time`.
    pub fn reference_angle(&self, time: f64, switch_time: f64) -> f64 {
        if time < switch_time - 1e-9 { self.theta_r1_deg } else { self.theta_r2_deg }.to_radians()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Ilqr,
    ScIlqr,
    SafeIlqr,
    SafeScIlqr,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Ilqr, Scheme::ScIlqr, Scheme::SafeIlqr, Scheme::SafeScIlqr];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Ilqr => "ilqr",
            Scheme::ScIlqr => "sc-ilqr",
            Scheme::SafeIlqr => "safe-ilqr",
            Scheme::SafeScIlqr => "safe-sc-ilqr",
        }
    }

    pub fn is_filtered(self) -> bool {
        matches!(self, Scheme::SafeIlqr | Scheme::SafeScIlqr)
    }

    pub fn is_soft_constrained(self) -> bool {
        matches!(self, Scheme::ScIlqr | Scheme::SafeScIlqr)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme `{s}`")))
    }
}

/// Tracking controller settings for the benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlqrConfig {
    pub horizon: usize,
    pub q_diag: Vec<f64>,
    pub r: f64,
    pub terminal_scale: f64,
    pub rho: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IlqrConfig {
    fn default() -> Self {
        Self { horizon: 20, q_diag: vec![10.0, 1.0], r: 0.01, terminal_scale: 1.0, rho: 100.0, tol: 1e-6, max_iter: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub params: PendulumParams,
    /// `|θ| ≤ state_bounds[0]`, `|θ̇| ≤ state_bounds[1]`.
    pub state_bounds: [f64; 2],
    pub input_bound: f64,
    pub filter: FilterConfig,
    pub ilqr: IlqrConfig,
    pub sigmas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub switch_time: f64,
    /// Let the planner see the reference switch ahead of time instead of holding
    /// the current reference over its horizon.
    pub preview_reference: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            params: PendulumParams::default(),
            state_bounds: [3.35, 2.4],
            input_bound: 15.0,
            filter: FilterConfig::default(),
            ilqr: IlqrConfig::default(),
            sigmas: vec![0.05, 0.1],
            seeds: vec![0, 1, 2],
            switch_time: 1.0,
            preview_reference: false,
        }
    }
}

impl BenchConfig {
    pub fn state_set(&self) -> Result<SoftPolytope> {
        SoftPolytope::symmetric_box(&self.state_bounds)
    }

    pub fn input_set(&self) -> Result<SoftPolytope> {
        SoftPolytope::symmetric_box(&[self.input_bound])
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.filter.validate()?;
        if self.state_bounds.iter().chain([&self.input_bound]).any(|b| !(*b > 0.0)) {
            return Err(Error::Config("constraint bounds must be positive".into()));
        }
        if self.ilqr.q_diag.len() != 2 || self.ilqr.horizon < self.filter.horizon {
            return Err(Error::Config("iLQR needs two state weights and a horizon no shorter than the filter's".into()));
        }
        Ok(())
    }

    pub fn ilqr_spec(&self, soft: bool) -> Result<IlqrSpec> {
        let c = &self.ilqr;
        let q = DMatrix::from_diagonal(&DVector::from_column_slice(&c.q_diag));
        let mut spec = IlqrSpec::new(c.horizon, q.clone(), DMatrix::from_element(1, 1, c.r), vec![DVector::zeros(2); c.horizon + 1]);
        spec.q_terminal = q * c.terminal_scale;
        spec.u_min = DVector::from_element(1, -self.input_bound);
        spec.u_max = DVector::from_element(1, self.input_bound);
        spec.tol = c.tol;
        spec.max_iter = c.max_iter;
        if soft {
            spec.rho = c.rho;
            spec.state_set = Some(self.state_set()?);
        }
        Ok(spec)
    }
}

/// What happened at one control step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub k: usize,
    pub u_ref: f64,
    pub u: f64,
    /// `None` for unfiltered schemes.
    pub certified: Option<bool>,
    pub max_slack: Option<f64>,
    pub iterations: Vec<IterationDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryLog {
    pub case: usize,
    pub scheme: Scheme,
    pub sigma_w: f64,
    pub seed: u64,
    /// `steps + 1` states `(θ, θ̇)`.
    pub states: Vec<[f64; 2]>,
    pub steps: Vec<StepRecord>,
}

impl TrajectoryLog {
    pub fn violation_pct(&self, state_set: &SoftPolytope) -> f64 {
        let states: Vec<DVector<f64>> = self.states.iter().map(|s| DVector::from_row_slice(s)).collect();
        violation_pct(&states, state_set)
    }

    /// `k,theta,theta_dot,u_ref,u,cert,max_slack`; the terminal state has empty input fields.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["k", "theta", "theta_dot", "u_ref", "u", "cert", "max_slack"])?;
        for (k, s) in self.states.iter().enumerate() {
            let rec = self.steps.get(k);
            out.write_record(&[
                k.to_string(),
                s[0].to_string(),
                s[1].to_string(),
                rec.map_or(String::new(), |r| r.u_ref.to_string()),
                rec.map_or(String::new(), |r| r.u.to_string()),
                rec.and_then(|r| r.certified).map_or(String::new(), |c| c.to_string()),
                rec.and_then(|r| r.max_slack).map_or(String::new(), |m| m.to_string()),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Filter diagnostics of every step (empty for unfiltered schemes).
    pub fn write_diagnostics_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_diagnostics_csv(
            writer,
            self.steps.iter().map(|s| (s.k, s.iterations.as_slice(), s.certified.unwrap_or(false))),
        )
    }
}

/// Percentage of states outside `state_set` (1e-9 tolerance).
pub fn violation_pct(states: &[DVector<f64>], state_set: &SoftPolytope) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    let outside = states.iter().filter(|x| !state_set.contains(x, 1e-9)).count();
    100.0 * outside as f64 / states.len() as f64
}

/// Closed-loop run of one scheme on one scenario.
pub fn run_case(
    model: &LearnedModel,
    case: &TestCase,
    scheme: Scheme,
    sigma_w: f64,
    seed: u64,
    config: &BenchConfig,
) -> Result<TrajectoryLog> {
    config.validate()?;
    let params = &config.params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut controller = PrimaryController::new(model.clone(), config.ilqr_spec(scheme.is_soft_constrained())?)?;
    let filter = if scheme.is_filtered() {
        Some(SafetyFilter::new(model.clone(), config.state_set()?, config.input_set()?, sigma_w, config.filter)?)
    } else {
        None
    };
    let steps = case.steps(params.dt);
    let horizon = config.ilqr.horizon;
    let mut x = case.x0();
    let mut log = TrajectoryLog {
        case: case.id,
        scheme,
        sigma_w,
        seed,
        states: vec![[x[0], x[1]]],
        steps: Vec::with_capacity(steps),
    };
    for k in 0..steps {
        let reference = (0..=horizon)
            .map(|j| {
                let time = if config.preview_reference { (k + j) as f64 } else { k as f64 } * params.dt;
                DVector::from_vec(vec![case.reference_angle(time, config.switch_time), 0.0])
            })
            .collect();
        let (u_ref, plan) = controller.plan(&x, reference)?;
        let mut record = StepRecord { k, u_ref: u_ref[0], u: u_ref[0], certified: None, max_slack: None, iterations: Vec::new() };
        if let Some(filter) = &filter {
            match filter.filter_step(&x, &u_ref, &plan) {
                Ok(result) => {
                    record.u = result.u0[0];
                    record.certified = Some(result.certified);
                    record.max_slack = Some(result.best_slack);
                    record.iterations = result.iterations;
                }
                Err(e) => {
                    warn!("case {} {scheme} step {k}: filter failed ({e}); applying the primary input", case.id);
                    record.certified = Some(false);
                }
            }
        }
        let u = DVector::from_element(1, record.u.clamp(-config.input_bound, config.input_bound));
        x = params.step_true(&x, &u, sigma_w, &mut rng);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: k + 1 });
        }
        log.states.push([x[0], x[1]]);
        log.steps.push(record);
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub scheme: Scheme,
    pub sigma_w: f64,
    pub case: usize,
    pub seed: u64,
    pub violation_pct: f64,
    pub certified_steps: usize,
}

/// Every scheme × σ_w × case × seed in `config`, run in parallel; rows come back
/// sorted by (scheme, σ_w, case, seed).
pub fn run_benchmark(model: &LearnedModel, config: &BenchConfig) -> Result<Vec<BenchRow>> {
    config.validate()?;
    let state_set = config.state_set()?;
    let mut jobs = Vec::new();
    for scheme in Scheme::ALL {
        for &sigma_w in &config.sigmas {
            for case in &TEST_CASES {
                for &seed in &config.seeds {
                    jobs.push((scheme, sigma_w, *case, seed));
                }
            }
        }
    }
    jobs.par_iter()
        .map(|&(scheme, sigma_w, case, seed)| {
            let log = run_case(model, &case, scheme, sigma_w, seed, config)?;
            let row = BenchRow {
                scheme,
                sigma_w,
                case: case.id,
                seed,
                violation_pct: log.violation_pct(&state_set),
                certified_steps: log.steps.iter().filter(|s| s.certified == Some(true)).count(),
            };
            info!("{scheme} σ_w={sigma_w} case {} seed {seed}: {:.2}% violations", case.id, row.violation_pct);
            Ok(row)
        })
        .collect()
}

/// `scheme,sigma_w,case,violation_pct` with the percentage averaged over seeds.
pub fn write_table_csv<W: Write>(writer: W, rows: &[BenchRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["scheme", "sigma_w", "case", "violation_pct"])?;
    let mut keys: Vec<(Scheme, f64, usize)> = Vec::new();
    for r in rows {
        let key = (r.scheme, r.sigma_w, r.case);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    for (scheme, sigma_w, case) in keys {
        let values: Vec<f64> = rows
            .iter()
            .filter(|r| r.scheme == scheme && r.sigma_w == sigma_w && r.case == case)
            .map(|r| r.violation_pct)
            .collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        out.write_record(&[scheme.to_string(), sigma_w.to_string(), case.to_string(), format!("{mean:.2}")])?;
    }
    out.flush()?;
    Ok(())
}

/// One row per run: `scheme,sigma_w,case,seed,violation_pct,certified_steps`.
pub fn write_runs_csv<W: Write>(writer: W, rows: &[BenchRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["scheme", "sigma_w", "case", "seed", "violation_pct", "certified_steps"])?;
    for r in rows {
        out.write_record(&[
            r.scheme.to_string(),
            r.sigma_w.to_string(),
            r.case.to_string(),
            r.seed.to_string(),
            r.violation_pct.to_string(),
            r.certified_steps.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Excitation used for the training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExcitationConfig {
    /// Torques are drawn from `[-torque_bound, torque_bound]`.
    pub torque_bound: f64,
    /// First-order low-pass factor on the random torque.
    pub smoothing: f64,
    /// The run restarts from a random state once `|θ|` or `|θ̇|` leaves this box.
    pub restart_box: [f64; 2],
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        Self { torque_bound: 15.0, smoothing: 0.7, restart_box: [4.0, 7.0] }
    }
}

/// One row per step: `theta,theta_dot,tau,res_theta,res_theta_dot` where the
/// residual is `x_{t+1} − A x_t − B u_t` of the noise-free plant.
pub fn export_dataset<W: Write>(
    writer: W,
    params: &PendulumParams,
    excitation: &ExcitationConfig,
    duration: f64,
    seed: u64,
) -> Result<usize> {
    params.validate()?;
    let (a, b) = linearized_plant();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (duration / params.dt).round() as usize;
    let [th_max, om_max] = excitation.restart_box;
    let random_state =
        |rng: &mut ChaCha8Rng| DVector::from_vec(vec![rng.random_range(-th_max..th_max), rng.random_range(-om_max..om_max)]);
    let mut x = random_state(&mut rng);
    let mut tau = 0.0;
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["theta", "theta_dot", "tau", "res_theta", "res_theta_dot"])?;
    for _ in 0..rows {
        let draw = rng.random_range(-excitation.torque_bound..=excitation.torque_bound);
        tau = excitation.smoothing * tau + (1.0 - excitation.smoothing) * draw;
        let u = DVector::from_element(1, tau);
        let next = params.step_exact(&x, &u);
        let residual = &next - &a * &x - &b * &u;
        out.write_record(&[x[0].to_string(), x[1].to_string(), tau.to_string(), residual[0].to_string(), residual[1].to_string()])?;
        x = if next[0].abs() > th_max || next[1].abs() > om_max { random_state(&mut rng) } else { next };
    }
    out.flush()?;
    Ok(rows)
}
