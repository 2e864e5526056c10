//! Optimisers over subspace coefficients (or full parameters) and
//! early-stopping rules.
//!
//! All optimisers report every iterate, starting with the initial point as
//! step 0, to an observer closure that may stop the run. `max_steps` counts
//! parameter updates, so `max_steps = 0` evaluates and reports only the
//! initial point.

mod adam;
mod lbfgs;
mod ngd;
mod stopping;

pub use adam::{adam_run, AdamConfig, AdamState};
pub use lbfgs::{lbfgs_run, LbfgsConfig, LineSearchRecord};
pub use ngd::{
    estimate_fim, exact_fim, fim_matvec, momentum_coefficients, natural_direction, ngd_run, ngd_step,
    quadratic_model, rho_ratio, update_damping_scaling, update_fim_ma, NgdConfig, NgdState, NgdStepInfo,
    RhoDirection,
};
pub use stopping::{replay_stop, StopState, VarianceStopState};

use crate::error::Result;
use crate::operators::Image;

/// Loss, gradient and (when the objective produces one) the reconstruction
/// at a point.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub image: Option<Image>,
}

pub trait Objective {
    fn dim(&self) -> usize;
    fn loss(&self, x: &[f64]) -> Result<f64>;
    fn evaluate(&self, x: &[f64]) -> Result<Evaluation>;
}

/// Access to the Jacobian `G` of the residual map at a fixed point, through
/// batched products only.
pub trait Linearization {
    /// Length of the residual (measurement) vector.
    fn output_dim(&self) -> usize;
    /// Rows `zᵢᵀ G` for `batch` residual-space vectors stored back to back.
    fn pullback(&self, z: &[f64], batch: usize) -> Result<Vec<f64>>;
    /// `G vᵢ` for `batch` parameter-space vectors stored back to back.
    fn pushforward(&self, v: &[f64], batch: usize) -> Result<Vec<f64>>;
}

/// Objectives whose curvature is summarised by the Fisher / Gauss-Newton
/// matrix `Gᵀ G`.
pub trait FisherObjective: Objective {
    fn linearize(&self, x: &[f64]) -> Result<(Evaluation, Box<dyn Linearization + '_>)>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// What an observer sees at every iterate.
pub struct StepInfo<'a> {
    pub step: usize,
    pub loss: f64,
    pub params: &'a [f64],
    pub image: Option<&'a Image>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    /// Parameters at the last reported iterate.
    pub params: Vec<f64>,
    /// Loss at every reported iterate.
    pub losses: Vec<f64>,
    pub stopped_by_observer: bool,
}

impl RunResult {
    pub fn steps(&self) -> usize {
        self.losses.len().saturating_sub(1)
    }
}

/// Observer that never stops the run.
pub fn no_observer(_: &StepInfo<'_>) -> Control {
    Control::Continue
}

#[cfg(test)]
pub(crate) mod testing;
