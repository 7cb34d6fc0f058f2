use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::network::MlpNetwork;

/// Nominal learned model `x⁺ = A x + B u + f(x, u)` with `f` a ReLU network.
#[derive(Debug, Clone)]
pub struct LearnedModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub net: Arc<MlpNetwork>,
}

impl LearnedModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, net: Arc<MlpNetwork>) -> Result<Self> {
        let nx = a.nrows();
        if a.ncols() != nx || b.nrows() != nx {
            return Err(Error::Dimension(format!(
                "plant A is {}x{}, B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        if net.input_dim() != nx + b.ncols() || net.output_dim() != nx {
            return Err(Error::Dimension(format!(
                "network maps {}→{} but the plant needs {}→{}",
                net.input_dim(),
                net.output_dim(),
                nx + b.ncols(),
                nx
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("plant matrices".into()));
        }
        Ok(Self { a, b, net })
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    pub fn stack(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(x.len() + u.len());
        z.rows_mut(0, x.len()).copy_from(x);
        z.rows_mut(x.len(), u.len()).copy_from(u);
        z
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.nx() || u.len() != self.nu() {
            return Err(Error::Dimension("state/input length".into()));
        }
        let residual = self.net.forward(&Self::stack(x, u))?;
        Ok(&self.a * x + &self.b * u + residual)
    }

    /// `(A + ∂f/∂x, B + ∂f/∂u)` at `(x, u)`.
    pub fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let jac = self.net.jacobian(&Self::stack(x, u))?;
        let (nx, nu) = (self.nx(), self.nu());
        let fx = &self.a + jac.columns(0, nx);
        let fu = &self.b + jac.columns(nx, nu);
        Ok((fx, fu))
    }
}
