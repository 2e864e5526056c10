use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result};
use crate::operators::Image;

/// Patience-based early stopping on a scalar metric.
///
/// The metric at index `i` counts as an improvement when it is below
/// `delta · g_min`. Observation continues while `i ≤ i_min + patience`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopState {
    pub delta: f64,
    pub patience: usize,
    g_min: f64,
    i_min: Option<usize>,
    i: usize,
}

impl StopState {
    pub fn new(delta: f64, patience: usize) -> Self {
        StopState {
            delta,
            patience,
            g_min: f64::INFINITY,
            i_min: None,
            i: 0,
        }
    }

    /// Defaults for stopping on the training loss.
    pub fn loss_default() -> Self {
        Self::new(0.995, 100)
    }

    /// Defaults for stopping on the reconstruction variance.
    pub fn variance_default() -> Self {
        Self::new(1.0, 1000)
    }

    /// Records metric value `g` at the next index and reports whether to
    /// continue.
    pub fn observe(&mut self, g: f64) -> bool {
        if g < self.delta * self.g_min {
            self.g_min = g;
            self.i_min = Some(self.i);
        }
        self.i += 1;
        self.should_continue()
    }

    pub fn should_continue(&self) -> bool {
        match self.i_min {
            Some(m) => self.i <= m + self.patience,
            None => true,
        }
    }

    pub fn best_index(&self) -> Option<usize> {
        self.i_min
    }

    pub fn best_value(&self) -> f64 {
        self.g_min
    }

    /// Number of metric values observed.
    pub fn observed(&self) -> usize {
        self.i
    }
}

/// Replays the stopping rule over a recorded metric. Returns the best
/// index if the rule stops within the sequence.
pub fn replay_stop(metric: &[f64], delta: f64, patience: usize) -> Option<usize> {
    let mut st = StopState::new(delta, patience);
    for &g in metric {
        if !st.observe(g) {
            return st.best_index();
        }
    }
    None
}

/// Rolling mean per-pixel variance (population convention) over the last
/// `window` reconstructions.
#[derive(Clone, Debug)]
pub struct VarianceStopState {
    window: usize,
    buffer: Vec<Vec<f64>>,
    head: usize,
    reference: Vec<f64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    since_refresh: usize,
}

impl VarianceStopState {
    pub const DEFAULT_WINDOW: usize = 100;

    pub fn new(window: usize) -> Self {
        VarianceStopState {
            window: window.max(1),
            buffer: Vec::new(),
            head: 0,
            reference: Vec::new(),
            sum: Vec::new(),
            sum_sq: Vec::new(),
            since_refresh: 0,
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Optimisation step corresponding to metric index `i`.
    pub fn step_of(&self, i: usize) -> usize {
        i + self.window - 1
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Adds a reconstruction; returns the metric once the window is full.
    pub fn push(&mut self, x: &Image) -> Result<Option<f64>> {
        let n = x.data.len();
        if self.buffer.is_empty() {
            self.reference = x.data.clone();
            self.sum = vec![0.0; n];
            self.sum_sq = vec![0.0; n];
        }
        check_len("variance window image", self.reference.len(), n)?;
        if self.buffer.len() < self.window {
            self.accumulate(&x.data, 1.0);
            self.buffer.push(x.data.clone());
        } else {
            let old = std::mem::replace(&mut self.buffer[self.head], x.data.clone());
            self.accumulate(&old, -1.0);
            self.accumulate(&x.data, 1.0);
            self.head = (self.head + 1) % self.window;
        }
        self.since_refresh += 1;
        // Sliding sums drift; rebuild them around a fresh reference.
        if self.since_refresh >= self.window {
            self.refresh();
        }
        Ok((self.buffer.len() == self.window).then(|| self.metric()))
    }

    fn accumulate(&mut self, x: &[f64], sign: f64) {
        for ((s, q), (&v, &r)) in self.sum.iter_mut().zip(self.sum_sq.iter_mut()).zip(x.iter().zip(&self.reference)) {
            let d = v - r;
            *s += sign * d;
            *q += sign * d * d;
        }
    }

    fn refresh(&mut self) {
        let w = self.buffer.len() as f64;
        let n = self.reference.len();
        let mut mean = vec![0.0; n];
        for img in &self.buffer {
            for (m, v) in mean.iter_mut().zip(img) {
                *m += v / w;
            }
        }
        self.reference = mean;
        self.sum.iter_mut().for_each(|v| *v = 0.0);
        self.sum_sq.iter_mut().for_each(|v| *v = 0.0);
        let buffer = std::mem::take(&mut self.buffer);
        for img in &buffer {
            self.accumulate(img, 1.0);
        }
        self.buffer = buffer;
        self.since_refresh = 0;
    }

    fn metric(&self) -> f64 {
        let w = self.buffer.len() as f64;
        let total: f64 = self
            .sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, q)| (q / w - (s / w) * (s / w)).max(0.0))
            .sum();
        total / self.sum.len().max(1) as f64
    }
}
