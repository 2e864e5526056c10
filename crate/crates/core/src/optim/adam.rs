use serde::{Deserialize, Serialize};

use super::{Control, Objective, RunResult, StepInfo};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "eps")]
    pub eps: f64,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: beta1(),
            beta2: beta2(),
            eps: eps(),
        }
    }

    /// Full-parameter DIP from random initialisation.
    pub fn dip() -> Self {
        Self::with_lr(1e-4)
    }

    /// Full-parameter DIP from pre-trained parameters.
    pub fn edip() -> Self {
        Self::with_lr(3e-5)
    }

    /// Subspace coefficients.
    pub fn subspace() -> Self {
        Self::with_lr(1e-3)
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, dim: usize) -> Result<Self> {
        if !(cfg.lr > 0.0) {
            return Err(Error::Config(format!("Adam learning rate must be positive, got {}", cfg.lr)));
        }
        Ok(AdamState {
            cfg,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        })
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..x.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g[i] * g[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            x[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

pub fn adam_run<O, F>(obj: &O, x0: &[f64], cfg: AdamConfig, max_steps: usize, mut observer: F) -> Result<RunResult>
where
    O: Objective + ?Sized,
    F: FnMut(&StepInfo<'_>) -> Control,
{
    let mut state = AdamState::new(cfg, x0.len())?;
    let mut x = x0.to_vec();
    let mut losses = Vec::new();
    for step in 0..=max_steps {
        let eval = obj.evaluate(&x)?;
        losses.push(eval.loss);
        let info = StepInfo {
            step,
            loss: eval.loss,
            params: &x,
            image: eval.image.as_ref(),
        };
        if observer(&info) == Control::Stop {
            return Ok(RunResult {
                params: x,
                losses,
                stopped_by_observer: true,
            });
        }
        if step == max_steps {
            break;
        }
        state.step(&mut x, &eval.grad);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("Adam produced non-finite parameters at step {step}")));
        }
    }
    Ok(RunResult {
        params: x,
        losses,
        stopped_by_observer: false,
    })
}
