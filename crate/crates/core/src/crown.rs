//! Backward linear relaxation of ReLU networks over ℓ∞ boxes, and the
//! linear-model-plus-envelope view of the dynamics derived from it.
//!
//! For a box `B∞(ẑ, r)` the relaxation produces `A_L z + b_L ≤ f(z) ≤ A_U z + b_U`
//! for every `z` in the box. Pre-activation bounds of every hidden layer are
//! obtained by running the same backward pass on the truncated network, so the
//! cost is polynomial in the neuron count.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::{DenseLayer, MlpNetwork};

/// ℓ∞ ball around a stacked state-input point.
#[derive(Debug, Clone, PartialEq)]
pub struct TrustRegion {
    pub center: DVector<f64>,
    pub radius: f64,
}

impl TrustRegion {
    pub fn new(center: DVector<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::Config(format!("trust-region radius must be positive, got {radius}")));
        }
        if center.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trust-region center".into()));
        }
        Ok(Self { center, radius })
    }

    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        z.iter()
            .zip(self.center.iter())
            .all(|(zi, ci)| (zi - ci).abs() <= self.radius + tol)
    }
}

/// Affine lower and upper bounds on the network output over a trust region.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBounds {
    pub a_lower: DMatrix<f64>,
    pub b_lower: DVector<f64>,
    pub a_upper: DMatrix<f64>,
    pub b_upper: DVector<f64>,
}

impl LinearBounds {
    pub fn lower_at(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.a_lower * z + &self.b_lower
    }

    pub fn upper_at(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.a_upper * z + &self.b_upper
    }
}

/// Per-neuron linear relaxation `lower_slope·p ≤ relu(p) ≤ upper_slope·p + upper_intercept`.
#[derive(Debug, Clone)]
struct ReluRelaxation {
    lower_slope: DVector<f64>,
    upper_slope: DVector<f64>,
    upper_intercept: DVector<f64>,
}

impl ReluRelaxation {
    fn from_bounds(lower: &DVector<f64>, upper: &DVector<f64>) -> Self {
        let n = lower.len();
        let mut relax = Self {
            lower_slope: DVector::zeros(n),
            upper_slope: DVector::zeros(n),
            upper_intercept: DVector::zeros(n),
        };
        for j in 0..n {
            let (l, u) = (lower[j], upper[j]);
            if u <= 0.0 {
                // inactive, including the degenerate l = u = 0
                continue;
            }
            if l >= 0.0 {
                relax.lower_slope[j] = 1.0;
                relax.upper_slope[j] = 1.0;
                continue;
            }
            relax.upper_slope[j] = u / (u - l);
            relax.upper_intercept[j] = -u * l / (u - l);
            relax.lower_slope[j] = if u >= -l { 1.0 } else { 0.0 };
        }
        relax
    }
}

/// Affine form `coeffs · z + offset` in network-input space.
struct AffineForm {
    coeffs: DMatrix<f64>,
    offset: DVector<f64>,
}

impl AffineForm {
    fn min_over(&self, region: &TrustRegion) -> DVector<f64> {
        self.extreme_over(region, -1.0)
    }

    fn max_over(&self, region: &TrustRegion) -> DVector<f64> {
        self.extreme_over(region, 1.0)
    }

    fn extreme_over(&self, region: &TrustRegion, sign: f64) -> DVector<f64> {
        let at_center = &self.coeffs * &region.center + &self.offset;
        DVector::from_fn(self.coeffs.nrows(), |i, _| {
            let l1: f64 = self.coeffs.row(i).iter().map(|c| c.abs()).sum();
            at_center[i] + sign * region.radius * l1
        })
    }
}

/// Backward pass from the pre-activation of `layers[target]` down to the input,
/// using `relaxations[k]` for the ReLU after `layers[k]`.
fn backward(
    layers: &[DenseLayer],
    target: usize,
    relaxations: &[ReluRelaxation],
) -> (AffineForm, AffineForm) {
    let top = &layers[target];
    let mut lower = AffineForm { coeffs: top.weights.clone(), offset: top.bias.clone() };
    let mut upper = AffineForm { coeffs: top.weights.clone(), offset: top.bias.clone() };

    for k in (0..target).rev() {
        let relax = &relaxations[k];
        let layer = &layers[k];
        // through the ReLU: pick the relaxation line by coefficient sign
        for (form, is_upper) in [(&mut lower, false), (&mut upper, true)] {
            let rows = form.coeffs.nrows();
            let cols = form.coeffs.ncols();
            let mut through = DMatrix::zeros(rows, cols);
            for j in 0..cols {
                for i in 0..rows {
                    let c = form.coeffs[(i, j)];
                    let use_upper_line = (c >= 0.0) == is_upper;
                    if use_upper_line {
                        through[(i, j)] = c * relax.upper_slope[j];
                        form.offset[i] += c * relax.upper_intercept[j];
                    } else {
                        through[(i, j)] = c * relax.lower_slope[j];
                    }
                }
            }
            // through the affine layer
            form.offset += &through * &layer.bias;
            form.coeffs = through * &layer.weights;
        }
    }
    (lower, upper)
}

/// Sound affine bounds of `net` over `region`.
pub fn relax(net: &MlpNetwork, region: &TrustRegion) -> Result<LinearBounds> {
    if region.center.len() != net.input_dim() {
        return Err(Error::Dimension(format!(
            "trust region has dimension {}, network input is {}",
            region.center.len(),
            net.input_dim()
        )));
    }
    if !(region.radius > 0.0) {
        return Err(Error::Config(format!("trust-region radius must be positive, got {}", region.radius)));
    }
    let layers = net.layers();
    let last = layers.len() - 1;
    let mut relaxations = Vec::with_capacity(last);
    for m in 0..last {
        let (lo, up) = backward(layers, m, &relaxations);
        relaxations.push(ReluRelaxation::from_bounds(&lo.min_over(region), &up.max_over(region)));
    }
    let (lo, up) = backward(layers, last, &relaxations);
    Ok(LinearBounds { a_lower: lo.coeffs, b_lower: lo.offset, a_upper: up.coeffs, b_upper: up.offset })
}

/// Relaxation at every step of a reference trajectory; steps are independent.
pub fn bounds_along_trajectory(net: &MlpNetwork, regions: &[TrustRegion]) -> Result<Vec<LinearBounds>> {
    regions.par_iter().map(|region| relax(net, region)).collect()
}

/// Linear dynamics at one step of the horizon together with the symmetric
/// envelope of the remaining network residual.
///
/// The residual `Δ(z)` is admissible when
/// `gain_lower·z + offset_lower ≤ Δ(z) ≤ gain_upper·z + offset_upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub gain_upper: DMatrix<f64>,
    pub gain_lower: DMatrix<f64>,
    pub offset_upper: DVector<f64>,
    pub offset_lower: DVector<f64>,
}

impl StepModel {
    /// Certain linear step with an empty envelope.
    pub fn exact(a: DMatrix<f64>, b: DMatrix<f64>, c: DVector<f64>) -> Self {
        let nx = a.nrows();
        let nz = nx + b.ncols();
        Self {
            a,
            b,
            c,
            gain_upper: DMatrix::zeros(nx, nz),
            gain_lower: DMatrix::zeros(nx, nz),
            offset_upper: DVector::zeros(nx),
            offset_lower: DVector::zeros(nx),
        }
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    /// `(lower, upper)` envelope of the residual at `z`.
    pub fn envelope_at(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (&self.gain_lower * z + &self.offset_lower, &self.gain_upper * z + &self.offset_upper)
    }

    /// Nominal part `A_t x + B_t u + c_t`.
    pub fn nominal(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.c
    }
}

/// Time-varying linear model with envelope, plus the additive disturbance bound.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyModel {
    pub steps: Vec<StepModel>,
    pub sigma_w: f64,
}

impl UncertaintyModel {
    pub fn new(steps: Vec<StepModel>, sigma_w: f64) -> Result<Self> {
        let first = steps.first().ok_or_else(|| Error::Config("empty horizon".into()))?;
        let (nx, nu) = (first.nx(), first.nu());
        for (t, s) in steps.iter().enumerate() {
            let ok = s.a.shape() == (nx, nx)
                && s.b.shape() == (nx, nu)
                && s.c.len() == nx
                && s.gain_upper.shape() == (nx, nx + nu)
                && s.gain_lower.shape() == (nx, nx + nu)
                && s.offset_upper.len() == nx
                && s.offset_lower.len() == nx;
            if !ok {
                return Err(Error::Dimension(format!("step {t} of the uncertainty model")));
            }
        }
        if !(sigma_w >= 0.0) || !sigma_w.is_finite() {
            return Err(Error::Config(format!("sigma_w must be non-negative, got {sigma_w}")));
        }
        Ok(Self { steps, sigma_w })
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn nx(&self) -> usize {
        self.steps[0].nx()
    }

    pub fn nu(&self) -> usize {
        self.steps[0].nu()
    }
}

/// Fold the means of the bounds into the plant and keep the half-gaps as the
/// envelope. The lower envelope is the exact negation of the upper one.
pub fn extract_uncertainty(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    bounds: &[LinearBounds],
    sigma_w: f64,
) -> Result<UncertaintyModel> {
    let nx = a.nrows();
    let nu = b.ncols();
    let steps = bounds
        .iter()
        .enumerate()
        .map(|(t, lb)| {
            if lb.a_lower.shape() != (nx, nx + nu) || lb.a_upper.shape() != (nx, nx + nu) {
                return Err(Error::Dimension(format!("bounds at step {t} do not match the plant")));
            }
            let mean = (&lb.a_lower + &lb.a_upper) / 2.0;
            let c = (&lb.b_lower + &lb.b_upper) / 2.0;
            Ok(StepModel {
                a: a + mean.columns(0, nx),
                b: b + mean.columns(nx, nu),
                c,
                gain_upper: (&lb.a_upper - &lb.a_lower) / 2.0,
                gain_lower: (&lb.a_lower - &lb.a_upper) / 2.0,
                offset_upper: (&lb.b_upper - &lb.b_lower) / 2.0,
                offset_lower: (&lb.b_lower - &lb.b_upper) / 2.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    UncertaintyModel::new(steps, sigma_w)
}

/// Debug dump: `step,row,col,a_lower,a_upper,b_lower,b_upper`, one line per matrix
/// entry (offsets repeated along the row).
pub fn write_bounds_csv<W: Write>(writer: W, bounds: &[LinearBounds]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["step", "row", "col", "a_lower", "a_upper", "b_lower", "b_upper"])?;
    for (t, lb) in bounds.iter().enumerate() {
        for i in 0..lb.a_lower.nrows() {
            for j in 0..lb.a_lower.ncols() {
                out.write_record(&[
                    t.to_string(),
                    i.to_string(),
                    j.to_string(),
                    lb.a_lower[(i, j)].to_string(),
                    lb.a_upper[(i, j)].to_string(),
                    lb.b_lower[i].to_string(),
                    lb.b_upper[i].to_string(),
                ])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}
