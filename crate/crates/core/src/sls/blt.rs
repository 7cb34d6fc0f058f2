use nalgebra::DMatrix;

/// Block-lower-triangular (causal) operator over a horizon `T`.
///
/// Block rows and columns run over `0..=T`. `block(t, c)` is the block in row `t`,
/// column `c ≤ t`; in lag notation `R^{t,j}` is `block(t, t - j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BltOperator {
    horizon: usize,
    rows: usize,
    cols: usize,
    blocks: Vec<DMatrix<f64>>,
}

impl BltOperator {
    pub fn zeros(horizon: usize, rows: usize, cols: usize) -> Self {
        let count = (horizon + 1) * (horizon + 2) / 2;
        Self { horizon, rows, cols, blocks: vec![DMatrix::zeros(rows, cols); count] }
    }

    fn index(&self, t: usize, c: usize) -> usize {
        assert!(c <= t && t <= self.horizon, "block ({t}, {c}) outside the causal pattern");
        t * (t + 1) / 2 + c
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// `(rows, cols)` of each block.
    pub fn block_dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn block(&self, t: usize, c: usize) -> &DMatrix<f64> {
        &self.blocks[self.index(t, c)]
    }

    pub fn block_mut(&mut self, t: usize, c: usize) -> &mut DMatrix<f64> {
        let i = self.index(t, c);
        &mut self.blocks[i]
    }

    /// `R^{t,lag}`.
    pub fn lag(&self, t: usize, lag: usize) -> &DMatrix<f64> {
        self.block(t, t - lag)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.horizon + 1;
        let mut dense = DMatrix::zeros(n * self.rows, n * self.cols);
        for t in 0..n {
            for c in 0..=t {
                dense
                    .view_mut((t * self.rows, c * self.cols), (self.rows, self.cols))
                    .copy_from(self.block(t, c));
            }
        }
        dense
    }
}
