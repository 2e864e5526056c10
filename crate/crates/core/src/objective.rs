//! Reconstruction objective `½‖A f(x†, θ) − y‖² + λ·TV(f(x†, θ))`, its
//! subspace reparametrisation, and image-quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::norm;
use crate::network::{Tape, Unet};
use crate::operators::{Image, LinearOperator};
use crate::optim::{Evaluation, FisherObjective, Linearization, Objective};
use crate::subspace::SubspaceModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Weight of the anisotropic TV term relative to the half squared
    /// residual.
    pub lambda: f64,
}

impl ObjectiveConfig {
    pub fn tomography() -> Self {
        ObjectiveConfig { lambda: 3e-5 }
    }

    pub fn restoration() -> Self {
        ObjectiveConfig { lambda: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("objective.lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Anisotropic total variation without wrap-around.
pub fn tv(x: &Image) -> f64 {
    let (h, w) = (x.height, x.width);
    let mut s = 0.0;
    for i in 0..h {
        for j in 0..w {
            if i + 1 < h {
                s += (x.at(i, j) - x.at(i + 1, j)).abs();
            }
            if j + 1 < w {
                s += (x.at(i, j) - x.at(i, j + 1)).abs();
            }
        }
    }
    s
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Subgradient of [`tv`] with `sign(0) = 0`.
pub fn tv_subgradient(x: &Image) -> Image {
    let (h, w) = (x.height, x.width);
    let mut g = Image::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            if i + 1 < h {
                let s = sign(x.at(i, j) - x.at(i + 1, j));
                *g.at_mut(i, j) += s;
                *g.at_mut(i + 1, j) -= s;
            }
            if j + 1 < w {
                let s = sign(x.at(i, j) - x.at(i, j + 1));
                *g.at_mut(i, j) += s;
                *g.at_mut(i, j + 1) -= s;
            }
        }
    }
    g
}

/// `10 log10(peak² / MSE)` with `peak = max(x_gt)`; `+∞` for an exact match.
pub fn psnr(x: &Image, x_gt: &Image) -> Result<f64> {
    if !x.same_shape(x_gt) {
        return Err(Error::DimensionMismatch {
            context: "psnr image shape".into(),
            expected: x_gt.len(),
            actual: x.len(),
        });
    }
    let mse = x.data.iter().zip(&x_gt.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = x_gt.max();
    Ok(10.0 * (peak * peak / mse).log10())
}

/// PSNR at the lowest loss seen so far.
#[derive(Clone, Debug, Default)]
pub struct PsnrTracker {
    best_loss: Option<f64>,
    psnr_at_best: f64,
    pub losses: Vec<f64>,
    pub raw: Vec<f64>,
    pub min_loss: Vec<f64>,
}

impl PsnrTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one step and returns the current min-loss PSNR. Ties keep
    /// the earlier PSNR.
    pub fn track(&mut self, loss: f64, psnr: f64) -> f64 {
        if self.best_loss.is_none_or(|b| loss < b) {
            self.best_loss = Some(loss);
            self.psnr_at_best = psnr;
        }
        self.losses.push(loss);
        self.raw.push(psnr);
        self.min_loss.push(self.psnr_at_best);
        self.psnr_at_best
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best_loss
    }

    pub fn psnr_at_best_loss(&self) -> f64 {
        self.psnr_at_best
    }
}

/// A network, a forward operator, data and a fixed network input.
#[derive(Clone, Copy)]
pub struct DipProblem<'a> {
    pub net: &'a Unet,
    pub op: &'a LinearOperator,
    pub y: &'a [f64],
    pub input: &'a Image,
    pub cfg: ObjectiveConfig,
}

/// Forward pass with the pieces needed for derivatives.
pub struct Forward {
    pub tape: Tape,
    pub image: Image,
    pub residual: Vec<f64>,
    pub loss: f64,
}

impl<'a> DipProblem<'a> {
    pub fn new(net: &'a Unet, op: &'a LinearOperator, y: &'a [f64], input: &'a Image, cfg: ObjectiveConfig) -> Result<Self> {
        cfg.validate()?;
        check_len("measurement", op.rows(), y.len())?;
        check_len("network output", op.cols(), net.output_len())?;
        Ok(DipProblem { net, op, y, input, cfg })
    }

    pub fn forward(&self, theta: &[f64]) -> Result<Forward> {
        let tape = self.net.tape(theta, self.input)?;
        let image = self.net.output_image(&tape);
        let mut residual = vec![0.0; self.op.rows()];
        self.op.apply_into(&image.data, &mut residual)?;
        residual.iter_mut().zip(self.y).for_each(|(r, y)| *r -= y);
        let fidelity = 0.5 * residual.iter().map(|r| r * r).sum::<f64>();
        let loss = fidelity + self.cfg.lambda * tv(&image);
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss (|theta| = {:.3e})",
                norm(theta)
            )));
        }
        Ok(Forward {
            tape,
            image,
            residual,
            loss,
        })
    }

    /// Output-space cotangent `Aᵀ(Af − y) + λ·∂TV(f)`.
    fn cotangent(&self, fwd: &Forward) -> Result<Vec<f64>> {
        let mut cot = vec![0.0; self.op.cols()];
        self.op.adjoint_into(&fwd.residual, &mut cot)?;
        if self.cfg.lambda != 0.0 {
            let sub = tv_subgradient(&fwd.image);
            cot.iter_mut().zip(&sub.data).for_each(|(c, s)| *c += self.cfg.lambda * s);
        }
        Ok(cot)
    }

    /// Loss and gradient with respect to all network parameters.
    pub fn evaluate_full(&self, theta: &[f64]) -> Result<(Forward, Vec<f64>)> {
        let fwd = self.forward(theta)?;
        let grad = self.net.vjp(&fwd.tape, &self.cotangent(&fwd)?)?;
        Ok((fwd, grad))
    }
}

/// The objective over all network parameters.
pub struct FullObjective<'a> {
    pub problem: DipProblem<'a>,
}

impl Objective for FullObjective<'_> {
    fn dim(&self) -> usize {
        self.problem.net.num_params()
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.problem.forward(theta)?.loss)
    }

    fn evaluate(&self, theta: &[f64]) -> Result<Evaluation> {
        let (fwd, grad) = self.problem.evaluate_full(theta)?;
        Ok(Evaluation {
            loss: fwd.loss,
            grad,
            image: Some(fwd.image),
        })
    }
}

/// The objective over subspace coefficients `c`, with `θ = θ_pre + MU c`.
pub struct SubspaceObjective<'a> {
    pub problem: DipProblem<'a>,
    pub model: &'a SubspaceModel,
}

impl<'a> SubspaceObjective<'a> {
    pub fn new(problem: DipProblem<'a>, model: &'a SubspaceModel) -> Result<Self> {
        check_len("subspace parameter count", problem.net.num_params(), model.d_theta())?;
        Ok(SubspaceObjective { problem, model })
    }

    fn forward(&self, c: &[f64]) -> Result<Forward> {
        let theta = self.model.gamma(c)?;
        self.problem.forward(&theta.data)
    }

    fn evaluation(&self, fwd: &Forward) -> Result<Evaluation> {
        let full = self.problem.net.vjp(&fwd.tape, &self.problem.cotangent(fwd)?)?;
        Ok(Evaluation {
            loss: fwd.loss,
            grad: self.model.basis.project(&full),
            image: Some(fwd.image.clone()),
        })
    }
}

impl Objective for SubspaceObjective<'_> {
    fn dim(&self) -> usize {
        self.model.d_sub()
    }

    fn loss(&self, c: &[f64]) -> Result<f64> {
        Ok(self.forward(c)?.loss)
    }

    fn evaluate(&self, c: &[f64]) -> Result<Evaluation> {
        let fwd = self.forward(c)?;
        self.evaluation(&fwd)
    }
}

/// Jacobian `G = A J_f MU` of the residual at a fixed coefficient vector.
struct SubspaceJacobian<'a> {
    problem: DipProblem<'a>,
    model: &'a SubspaceModel,
    tape: Tape,
}

impl Linearization for SubspaceJacobian<'_> {
    fn output_dim(&self) -> usize {
        self.problem.op.rows()
    }

    fn pullback(&self, z: &[f64], batch: usize) -> Result<Vec<f64>> {
        let (m, n) = (self.problem.op.rows(), self.problem.op.cols());
        check_len("pullback batch", batch * m, z.len())?;
        let mut cot = vec![0.0; batch * n];
        for (zi, ci) in z.chunks_exact(m).zip(cot.chunks_exact_mut(n)) {
            self.problem.op.adjoint_into(zi, ci)?;
        }
        let full = self.problem.net.vjp_batch(&self.tape, &cot, batch)?;
        Ok(self.model.basis.project_batch(&full, batch))
    }

    fn pushforward(&self, v: &[f64], batch: usize) -> Result<Vec<f64>> {
        let (m, n) = (self.problem.op.rows(), self.problem.op.cols());
        check_len("pushforward batch", batch * self.model.d_sub(), v.len())?;
        let dirs = self.model.basis.expand_batch(v, batch);
        let tangents = self.problem.net.jvp_batch(&self.tape, &dirs, batch)?;
        let mut out = vec![0.0; batch * m];
        for (ti, oi) in tangents.chunks_exact(n).zip(out.chunks_exact_mut(m)) {
            self.problem.op.apply_into(ti, oi)?;
        }
        Ok(out)
    }
}

impl FisherObjective for SubspaceObjective<'_> {
    fn linearize(&self, c: &[f64]) -> Result<(Evaluation, Box<dyn Linearization + '_>)> {
        let fwd = self.forward(c)?;
        let eval = self.evaluation(&fwd)?;
        let lin = SubspaceJacobian {
            problem: self.problem,
            model: self.model,
            tape: fwd.tape,
        };
        Ok((eval, Box::new(lin)))
    }
}
