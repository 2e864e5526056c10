//! Closed-form test objectives.

use nalgebra::{DMatrix, DVector};

use super::{Evaluation, FisherObjective, Linearization, Objective};
use crate::error::Result;

/// `½ xᵀ H x - bᵀ x`
pub(crate) struct Quadratic {
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Quadratic {
    pub fn diagonal(h: Vec<f64>, b: Vec<f64>) -> Self {
        Quadratic {
            h: DMatrix::from_diagonal(&DVector::from_vec(h)),
            b: DVector::from_vec(b),
        }
    }

    pub fn minimiser(&self) -> DVector<f64> {
        self.h.clone().cholesky().unwrap().solve(&self.b)
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn loss(&self, x: &[f64]) -> Result<f64> {
        let x = DVector::from_column_slice(x);
        Ok(0.5 * x.dot(&(&self.h * &x)) - self.b.dot(&x))
    }

    fn evaluate(&self, x: &[f64]) -> Result<Evaluation> {
        let xv = DVector::from_column_slice(x);
        let g = &self.h * &xv - &self.b;
        Ok(Evaluation {
            loss: self.loss(x)?,
            grad: g.iter().copied().collect(),
            image: None,
        })
    }
}

pub(crate) struct Rosenbrock;

impl Objective for Rosenbrock {
    fn dim(&self) -> usize {
        2
    }

    fn loss(&self, x: &[f64]) -> Result<f64> {
        Ok((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2))
    }

    fn evaluate(&self, x: &[f64]) -> Result<Evaluation> {
        let t = x[1] - x[0] * x[0];
        Ok(Evaluation {
            loss: self.loss(x)?,
            grad: vec![-2.0 * (1.0 - x[0]) - 400.0 * x[0] * t, 200.0 * t],
            image: None,
        })
    }
}

/// `½‖B c - y‖²`, whose Fisher matrix is exactly `BᵀB`.
pub(crate) struct LinearLeastSquares {
    pub b: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl LinearLeastSquares {
    pub fn solution(&self) -> DVector<f64> {
        let btb = self.b.transpose() * &self.b;
        btb.cholesky().unwrap().solve(&(self.b.transpose() * &self.y))
    }
}

impl Objective for LinearLeastSquares {
    fn dim(&self) -> usize {
        self.b.ncols()
    }

    fn loss(&self, x: &[f64]) -> Result<f64> {
        let r = &self.b * DVector::from_column_slice(x) - &self.y;
        Ok(0.5 * r.norm_squared())
    }

    fn evaluate(&self, x: &[f64]) -> Result<Evaluation> {
        let r = &self.b * DVector::from_column_slice(x) - &self.y;
        Ok(Evaluation {
            loss: 0.5 * r.norm_squared(),
            grad: (self.b.transpose() * r).iter().copied().collect(),
            image: None,
        })
    }
}

struct DenseJacobian<'a>(&'a DMatrix<f64>);

impl Linearization for DenseJacobian<'_> {
    fn output_dim(&self) -> usize {
        self.0.nrows()
    }

    fn pullback(&self, z: &[f64], batch: usize) -> Result<Vec<f64>> {
        let m = self.0.nrows();
        let mut out = Vec::with_capacity(batch * self.0.ncols());
        for zb in z.chunks(m).take(batch) {
            out.extend((self.0.transpose() * DVector::from_column_slice(zb)).iter());
        }
        Ok(out)
    }

    fn pushforward(&self, v: &[f64], batch: usize) -> Result<Vec<f64>> {
        let n = self.0.ncols();
        let mut out = Vec::with_capacity(batch * self.0.nrows());
        for vb in v.chunks(n).take(batch) {
            out.extend((self.0 * DVector::from_column_slice(vb)).iter());
        }
        Ok(out)
    }
}

impl FisherObjective for LinearLeastSquares {
    fn linearize(&self, x: &[f64]) -> Result<(Evaluation, Box<dyn Linearization + '_>)> {
        Ok((self.evaluate(x)?, Box::new(DenseJacobian(&self.b))))
    }
}
