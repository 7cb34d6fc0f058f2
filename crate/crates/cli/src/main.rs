use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use nalgebra::{DMatrix, DVector};
use nnpsf::crown::{
    bounds_along_trajectory, extract_uncertainty, relax, write_bounds_csv, StepModel, TrustRegion, UncertaintyModel,
};
use nnpsf::dynamics::LearnedModel;
use nnpsf::ilqr::PrimaryController;
use nnpsf::network::MlpNetwork;
use nnpsf::pendulum::{
    default_network, export_dataset, linearized_plant, run_benchmark, run_case, write_runs_csv, write_table_csv, BenchConfig,
    ExcitationConfig, Scheme, TestCase,
};
use nnpsf::psf::{rollout_nominal, SafetyFilter};
use nnpsf::sls::{assemble, SlsProblem, SoftPolytope, SolverSettings};

#[derive(Parser)]
#[command(name = "nnpsf", version, about = "Predictive safety filter for ReLU-network dynamics")]
struct Cli {
    /// JSON file overriding the benchmark configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Residual network weights; defaults to the bundled pendulum network.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every scheme on every scenario and write the violation table.
    Bench {
        #[arg(long, default_value = "table2.csv")]
        out: PathBuf,
        /// Also write one row per (scheme, σ_w, case, seed).
        #[arg(long)]
        runs: Option<PathBuf>,
    },
    /// Simulate one scenario and write its trajectory.
    Simulate {
        #[arg(long)]
        case: usize,
        #[arg(long, default_value = "safe-ilqr")]
        scheme: Scheme,
        #[arg(long, default_value_t = 0.05)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "trajectory.csv")]
        out: PathBuf,
        /// Per-iteration filter diagnostics.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Write a training set of one-step residuals.
    ExportDataset {
        #[arg(long, default_value = "dataset.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = 15.0)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Quick self-check of the main properties.
    Check,
    /// Export the first filter program of a scenario in triplet form.
    DumpQp {
        #[arg(long, default_value_t = 1)]
        case: usize,
        #[arg(long, default_value_t = 0.05)]
        sigma: f64,
        #[arg(long, default_value = "qp.txt")]
        out: PathBuf,
        /// Also dump the per-step network bounds.
        #[arg(long)]
        bounds_csv: Option<PathBuf>,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_config(path: Option<&Path>) -> Result<BenchConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => Ok(BenchConfig::default()),
    }
}

fn load_model(weights: Option<&Path>) -> Result<LearnedModel> {
    let net = match weights {
        Some(p) => MlpNetwork::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => default_network(),
    };
    let (a, b) = linearized_plant();
    Ok(LearnedModel::new(a, b, Arc::new(net))?)
}

fn bench(model: &LearnedModel, config: &BenchConfig, out: &Path, runs: Option<&Path>) -> Result<()> {
    let rows = run_benchmark(model, config)?;
    write_table_csv(create(out)?, &rows)?;
    if let Some(path) = runs {
        write_runs_csv(create(path)?, &rows)?;
    }
    for scheme in Scheme::ALL {
        for &sigma in &config.sigmas {
            let pcts: Vec<f64> = rows
                .iter()
                .filter(|r| r.scheme == scheme && r.sigma_w == sigma)
                .map(|r| r.violation_pct)
                .collect();
            let mean = pcts.iter().sum::<f64>() / pcts.len().max(1) as f64;
            println!("{:<13} σ_w={sigma:<5} mean violation {mean:6.2}%", scheme.name());
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn check(model: &LearnedModel) -> Result<()> {
    let mut failures = 0;
    let mut report = |name: &str, ok: bool, detail: String| {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        failures += usize::from(!ok);
    };

    // bounds enclose the bundled network around a few states
    let mut worst = f64::NEG_INFINITY;
    let mut symmetric = true;
    for (i, center) in [[0.0, 0.0, 0.0], [1.0, -2.0, 5.0], [-2.5, 3.0, -10.0]].iter().enumerate() {
        let region = TrustRegion::new(DVector::from_row_slice(center), 0.2)?;
        let lb = relax(&model.net, &region)?;
        for k in 0..2000 {
            let z = DVector::from_fn(3, |j, _| {
                let phase = ((k * 7 + j * 13 + i) as f64 * 0.618_033_988_75).fract();
                center[j] + 0.2 * (2.0 * phase - 1.0)
            });
            let f = model.net.forward(&z)?;
            worst = worst.max((lb.lower_at(&z) - &f).max()).max((&f - lb.upper_at(&z)).max());
        }
        let unc = extract_uncertainty(&model.a, &model.b, &[lb], 0.0)?;
        let s = &unc.steps[0];
        symmetric &= s.gain_lower == -&s.gain_upper && s.offset_lower == -&s.offset_upper;
    }
    report("bound soundness", worst <= 1e-9, format!("largest violation {worst:.3e}"));
    report("envelope symmetry", symmetric, "bitwise".into());

    // x⁺ = x + u, |x|, |u| ≤ 1, u_ref = 5 → v_0 = 1, objective 16
    let one = DMatrix::from_element(1, 1, 1.0);
    let step = StepModel::exact(one.clone(), one, DVector::zeros(1));
    let unc = UncertaintyModel::new(vec![step], 0.0)?;
    let mut problem = SlsProblem::new(
        unc,
        SoftPolytope::symmetric_box(&[1.0])?,
        SoftPolytope::symmetric_box(&[1.0])?,
        vec![TrustRegion::new(DVector::zeros(2), 10.0)?],
        DVector::zeros(1),
        DVector::from_element(1, 5.0),
    );
    problem.psi_min = 1e-9;
    problem.backoff = 0.0;
    let sol = assemble(&problem)?.solve(&SolverSettings::default())?;
    let v0 = sol.v[0][0];
    report(
        "box projection",
        (v0 - 1.0).abs() < 1e-6 && (sol.objective - 16.0).abs() < 1e-6,
        format!("v_0 = {v0:.8}, objective {:.8}", sol.objective),
    );

    if failures > 0 {
        bail!("{failures} check(s) failed");
    }
    Ok(())
}

fn dump_qp(model: &LearnedModel, config: &BenchConfig, case: usize, sigma: f64, out: &Path, bounds: Option<&Path>) -> Result<()> {
    let case = TestCase::by_id(case)?;
    let x0 = case.x0();
    let mut controller = PrimaryController::new(model.clone(), config.ilqr_spec(false)?)?;
    let reference = (0..=config.ilqr.horizon)
        .map(|j| DVector::from_vec(vec![case.reference_angle(j as f64 * config.params.dt, config.switch_time), 0.0]))
        .collect();
    let (u_ref, plan) = controller.plan(&x0, reference)?;
    let filter = SafetyFilter::new(model.clone(), config.state_set()?, config.input_set()?, sigma, config.filter)?;
    let horizon = config.filter.horizon;
    let states = rollout_nominal(model, &x0, &plan[..horizon])?;
    let regions = (0..horizon)
        .map(|t| TrustRegion::new(LearnedModel::stack(&states[t], &plan[t]), config.filter.initial_radius))
        .collect::<nnpsf::Result<Vec<_>>>()?;
    let problem = filter.problem(&x0, &u_ref, &regions)?;
    let qp = assemble(&problem)?;
    qp.qp.write_triplets(create(out)?)?;
    println!(
        "wrote {} ({} variables, {} constraints)",
        out.display(),
        qp.qp.num_vars,
        qp.qp.num_constraints()
    );
    if let Some(path) = bounds {
        write_bounds_csv(create(path)?, &bounds_along_trajectory(&model.net, &regions)?)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("NNPSF_LOG", "warn")).init();
    let cli = Cli::parse();
    let config = load_config(cli.config.as_deref())?;
    config.validate()?;
    let model = load_model(cli.weights.as_deref())?;
    match cli.command {
        Command::Bench { out, runs } => bench(&model, &config, &out, runs.as_deref()),
        Command::Simulate { case, scheme, sigma, seed, out, diagnostics } => {
            let case = TestCase::by_id(case)?;
            let log = run_case(&model, &case, scheme, sigma, seed, &config)?;
            log.write_csv(create(&out)?)?;
            let pct = log.violation_pct(&config.state_set()?);
            println!("case {} {scheme} σ_w={sigma} seed {seed}: {pct:.2}% violations, wrote {}", case.id, out.display());
            if let Some(path) = diagnostics {
                log.write_diagnostics_csv(create(&path)?)?;
                info!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::ExportDataset { out, duration, seed } => {
            let rows = export_dataset(create(&out)?, &config.params, &ExcitationConfig::default(), duration, seed)?;
            println!("wrote {rows} rows to {}", out.display());
            Ok(())
        }
        Command::Check => check(&model),
        Command::DumpQp { case, sigma, out, bounds_csv } => dump_qp(&model, &config, case, sigma, &out, bounds_csv.as_deref()),
    }
}
