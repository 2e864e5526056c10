use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{Control, Evaluation, Objective, RunResult, StepInfo};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LbfgsConfig {
    #[serde(default = "history")]
    pub history: usize,
    #[serde(default = "c1")]
    pub c1: f64,
    #[serde(default = "c2")]
    pub c2: f64,
    /// Stop once the gradient norm is at or below this value.
    #[serde(default)]
    pub grad_tol: f64,
    #[serde(default = "max_evals")]
    pub max_line_search_evals: usize,
}

fn history() -> usize {
    10
}
fn c1() -> f64 {
    1e-4
}
fn c2() -> f64 {
    0.9
}
fn max_evals() -> usize {
    25
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            history: history(),
            c1: c1(),
            c2: c2(),
            grad_tol: 0.0,
            max_line_search_evals: max_evals(),
        }
    }
}

/// Line-search outcome for one accepted step.
#[derive(Clone, Copy, Debug)]
pub struct LineSearchRecord {
    pub alpha: f64,
    pub f0: f64,
    pub slope0: f64,
    pub f_new: f64,
    pub slope_new: f64,
    /// The step came from the steepest-descent backtracking fallback.
    pub fallback: bool,
}

const SKIP_CURVATURE: f64 = 1e-10;

struct Point {
    alpha: f64,
    f: f64,
    slope: f64,
}

struct LineSearch<'a, O: Objective + ?Sized> {
    obj: &'a O,
    x: &'a [f64],
    d: &'a [f64],
    f0: f64,
    slope0: f64,
    cfg: &'a LbfgsConfig,
    evals: usize,
}

impl<O: Objective + ?Sized> LineSearch<'_, O> {
    fn eval(&mut self, alpha: f64) -> Result<(Point, Evaluation)> {
        self.evals += 1;
        let mut xn = self.x.to_vec();
        axpy(alpha, self.d, &mut xn);
        let e = match self.obj.evaluate(&xn) {
            Ok(e) => e,
            // Blow-ups along the ray count as infinitely bad trial points.
            Err(Error::Numerical(_)) => Evaluation {
                loss: f64::INFINITY,
                grad: vec![f64::NAN; xn.len()],
                image: None,
            },
            Err(e) => return Err(e),
        };
        let slope = if e.loss.is_finite() { dot(&e.grad, self.d) } else { f64::NAN };
        Ok((
            Point {
                alpha,
                f: if e.loss.is_finite() { e.loss } else { f64::INFINITY },
                slope,
            },
            e,
        ))
    }

    fn armijo_fails(&self, p: &Point) -> bool {
        !(p.f <= self.f0 + self.cfg.c1 * p.alpha * self.slope0)
    }

    fn curvature_holds(&self, p: &Point) -> bool {
        p.slope.abs() <= -self.cfg.c2 * self.slope0
    }

    /// Strong-Wolfe bracketing search.
    fn run(&mut self, alpha0: f64) -> Result<Option<(Point, Evaluation)>> {
        let mut prev = Point {
            alpha: 0.0,
            f: self.f0,
            slope: self.slope0,
        };
        let mut alpha = alpha0;
        let mut first = true;
        while self.evals < self.cfg.max_line_search_evals {
            let (p, e) = self.eval(alpha)?;
            if self.armijo_fails(&p) || (!first && p.f >= prev.f) {
                return self.zoom(prev, p);
            }
            if self.curvature_holds(&p) {
                return Ok(Some((p, e)));
            }
            if p.slope >= 0.0 {
                return self.zoom(p, prev);
            }
            first = false;
            alpha *= 2.0;
            prev = p;
        }
        Ok(None)
    }

    fn zoom(&mut self, mut lo: Point, mut hi: Point) -> Result<Option<(Point, Evaluation)>> {
        while self.evals < self.cfg.max_line_search_evals {
            let width = hi.alpha - lo.alpha;
            if width.abs() <= 1e-16 * lo.alpha.abs().max(1.0) {
                return Ok(None);
            }
            let alpha = interpolate(&lo, &hi);
            let (p, e) = self.eval(alpha)?;
            if self.armijo_fails(&p) || p.f >= lo.f {
                hi = p;
            } else {
                if self.curvature_holds(&p) {
                    return Ok(Some((p, e)));
                }
                if p.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = p;
            }
        }
        Ok(None)
    }
}

/// Safeguarded cubic interpolation of the minimiser between two bracket
/// ends; falls back to bisection.
fn interpolate(lo: &Point, hi: &Point) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let mid = 0.5 * (a + b);
    if !(hi.f.is_finite() && hi.slope.is_finite()) {
        return mid;
    }
    let d1 = lo.slope + hi.slope - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - lo.slope * hi.slope;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2);
    let (left, right) = if a < b { (a, b) } else { (b, a) };
    let margin = 0.1 * (right - left);
    if t.is_finite() && t >= left + margin && t <= right - margin {
        t
    } else {
        mid
    }
}

/// Two-loop recursion: `-H g` from stored `(s, y)` pairs.
fn two_loop(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        axpy(-a, y, &mut q);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        axpy(a - b, s, &mut q);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Limited-memory BFGS with a strong-Wolfe line search.
///
/// Curvature pairs with `sᵀy ≤ 1e-10` are skipped. If the line search
/// fails the step falls back to backtracking along the steepest-descent
/// direction; two consecutive failures end the run.
pub fn lbfgs_run<O, F>(
    obj: &O,
    x0: &[f64],
    cfg: LbfgsConfig,
    max_steps: usize,
    mut observer: F,
) -> Result<(RunResult, Vec<LineSearchRecord>)>
where
    O: Objective + ?Sized,
    F: FnMut(&StepInfo<'_>) -> Control,
{
    if cfg.history == 0 {
        return Err(Error::Config("L-BFGS history must be at least 1".into()));
    }
    let mut x = x0.to_vec();
    let mut eval = obj.evaluate(&x)?;
    let mut losses = vec![eval.loss];
    let mut records = Vec::new();
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.history);
    let mut failures = 0;
    let finish = |x: Vec<f64>, losses: Vec<f64>, records, stopped| {
        Ok((
            RunResult {
                params: x,
                losses,
                stopped_by_observer: stopped,
            },
            records,
        ))
    };

    for step in 0..=max_steps {
        let info = StepInfo {
            step,
            loss: eval.loss,
            params: &x,
            image: eval.image.as_ref(),
        };
        if observer(&info) == Control::Stop {
            return finish(x, losses, records, true);
        }
        let gnorm = norm(&eval.grad);
        if step == max_steps || gnorm <= cfg.grad_tol {
            break;
        }

        let mut d = two_loop(&eval.grad, &pairs);
        let mut slope0 = dot(&eval.grad, &d);
        if !(slope0 < 0.0) {
            pairs.clear();
            d = eval.grad.iter().map(|g| -g).collect();
            slope0 = -gnorm * gnorm;
        }
        let alpha0 = if pairs.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };
        let mut ls = LineSearch {
            obj,
            x: &x,
            d: &d,
            f0: eval.loss,
            slope0,
            cfg: &cfg,
            evals: 0,
        };
        let accepted = match ls.run(alpha0)? {
            Some((p, e)) => {
                failures = 0;
                records.push(LineSearchRecord {
                    alpha: p.alpha,
                    f0: eval.loss,
                    slope0,
                    f_new: p.f,
                    slope_new: p.slope,
                    fallback: false,
                });
                Some((p.alpha, d, e))
            }
            None => {
                failures += 1;
                if failures >= 2 {
                    break;
                }
                pairs.clear();
                let sd: Vec<f64> = eval.grad.iter().map(|g| -g).collect();
                backtrack(obj, &x, &sd, eval.loss, -gnorm * gnorm, cfg.c1, 1.0 / gnorm)?.map(|(alpha, e)| {
                    records.push(LineSearchRecord {
                        alpha,
                        f0: eval.loss,
                        slope0: -gnorm * gnorm,
                        f_new: e.loss,
                        slope_new: dot(&e.grad, &sd),
                        fallback: true,
                    });
                    (alpha, sd, e)
                })
            }
        };
        let Some((alpha, d, new_eval)) = accepted else {
            continue;
        };
        let s: Vec<f64> = d.iter().map(|v| alpha * v).collect();
        let y: Vec<f64> = new_eval.grad.iter().zip(&eval.grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > SKIP_CURVATURE {
            if pairs.len() == cfg.history {
                pairs.pop_front();
            }
            pairs.push_back((s.clone(), y, 1.0 / sy));
        }
        axpy(1.0, &s, &mut x);
        eval = new_eval;
        losses.push(eval.loss);
    }
    finish(x, losses, records, false)
}

fn backtrack<O: Objective + ?Sized>(
    obj: &O,
    x: &[f64],
    d: &[f64],
    f0: f64,
    slope0: f64,
    c1: f64,
    alpha0: f64,
) -> Result<Option<(f64, Evaluation)>> {
    let mut alpha = alpha0;
    for _ in 0..50 {
        let mut xn = x.to_vec();
        axpy(alpha, d, &mut xn);
        match obj.evaluate(&xn) {
            Ok(e) if e.loss <= f0 + c1 * alpha * slope0 => return Ok(Some((alpha, e))),
            Ok(_) | Err(Error::Numerical(_)) => alpha *= 0.5,
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}
