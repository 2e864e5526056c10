//! Parallel-beam ray transform and filtered back-projection.
//!
//! Coordinates are in pixel units with the origin at the image centre, `x`
//! pointing right and `y` pointing up; pixel `(r, c)` covers
//! `[c - w/2, c + 1 - w/2) x [h/2 - r - 1, h/2 - r)`. The ray for angle
//! `theta` and detector offset `t` is `{ t·n + s·d }` with
//! `d = (cos theta, sin theta)` and `n = (-sin theta, cos theta)`, so angle 0
//! gives horizontal rays.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{AssemblyOptions, Image, LinearOperator, Measurement, OperatorKind};
use crate::error::{check_len, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelBeamGeometry {
    pub n_angles: usize,
    pub n_detectors: usize,
    #[serde(default = "default_spacing")]
    pub detector_spacing: f64,
}

fn default_spacing() -> f64 {
    1.0
}

impl ParallelBeamGeometry {
    pub fn new(n_angles: usize, n_detectors: usize) -> Self {
        ParallelBeamGeometry {
            n_angles,
            n_detectors,
            detector_spacing: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_angles == 0 || self.n_detectors == 0 {
            return Err(Error::Config(
                "parallel-beam geometry needs at least one angle and one detector".into(),
            ));
        }
        if !(self.detector_spacing > 0.0 && self.detector_spacing.is_finite()) {
            return Err(Error::Config("detector spacing must be positive".into()));
        }
        Ok(())
    }

    pub fn measurement_len(&self) -> usize {
        self.n_angles * self.n_detectors
    }

    /// Uniform angles on `[0, pi)` starting at 0.
    pub fn angles(&self) -> Vec<f64> {
        (0..self.n_angles)
            .map(|k| k as f64 * PI / self.n_angles as f64)
            .collect()
    }

    pub fn detector_offset(&self, j: usize) -> f64 {
        (j as f64 - (self.n_detectors as f64 - 1.0) / 2.0) * self.detector_spacing
    }
}

/// Length of the chord of the ray `{p0 + s·d}` through the half-open box
/// `[xmin, xmax) x [ymin, ymax)`.
pub(crate) fn chord_length(p0: (f64, f64), d: (f64, f64), bx: (f64, f64), by: (f64, f64)) -> f64 {
    const PARALLEL: f64 = 1e-14;
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for (p, dir, (bmin, bmax)) in [(p0.0, d.0, bx), (p0.1, d.1, by)] {
        if dir.abs() < PARALLEL {
            if p < bmin || p >= bmax {
                return 0.0;
            }
        } else {
            let a = (bmin - p) / dir;
            let b = (bmax - p) / dir;
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
    }
    (hi - lo).max(0.0)
}

/// Assembles the ray transform column by column: column `j` is the projection
/// of the `j`-th standard-basis image, computed with exact ray/pixel chord
/// lengths.
pub fn assemble_parallel_beam(
    geometry: &ParallelBeamGeometry,
    height: usize,
    width: usize,
    opts: &AssemblyOptions,
) -> Result<LinearOperator> {
    geometry.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::Config("image dimensions must be positive".into()));
    }
    let rows = geometry.measurement_len();
    let angles = geometry.angles();
    let trig: Vec<(f64, f64)> = angles.iter().map(|a| (a.cos(), a.sin())).collect();
    let nd = geometry.n_detectors;
    let spacing = geometry.detector_spacing;
    let centre = (nd as f64 - 1.0) / 2.0;

    let mut columns = Vec::with_capacity(height * width);
    for r in 0..height {
        let ymax = height as f64 / 2.0 - r as f64;
        let by = (ymax - 1.0, ymax);
        for c in 0..width {
            let xmin = c as f64 - width as f64 / 2.0;
            let bx = (xmin, xmin + 1.0);
            let (cx, cy) = (xmin + 0.5, ymax - 0.5);
            let mut col = Vec::new();
            for (k, &(cos, sin)) in trig.iter().enumerate() {
                // Detectors whose ray can touch the pixel.
                let t_mid = -cx * sin + cy * cos;
                let reach = 0.5 * (sin.abs() + cos.abs()) + 1e-9;
                let j_lo = ((t_mid - reach) / spacing + centre).floor().max(0.0) as usize;
                let j_hi = (((t_mid + reach) / spacing + centre).ceil()).min(nd as f64 - 1.0);
                if j_hi < 0.0 {
                    continue;
                }
                for j in j_lo..=(j_hi as usize) {
                    let t = geometry.detector_offset(j);
                    let len = chord_length((-t * sin, t * cos), (cos, sin), bx, by);
                    if len > 0.0 {
                        col.push(((k * nd + j) as u32, len));
                    }
                }
            }
            columns.push(col);
        }
    }
    LinearOperator::from_columns(
        rows,
        columns,
        OperatorKind::Tomography {
            geometry: geometry.clone(),
            height,
            width,
        },
        opts,
    )
}

/// Filtered back-projection with an unwindowed Ram-Lak filter.
///
/// Each projection is convolved with the discrete ramp kernel
/// (`h[0] = 1/(4τ²)`, `h[odd k] = -1/(π²k²τ²)`, zero otherwise) via a
/// zero-padded FFT, then smeared back along its rays with linear detector
/// interpolation.
pub fn fbp(
    geometry: &ParallelBeamGeometry,
    y: &Measurement,
    height: usize,
    width: usize,
) -> Result<Image> {
    geometry.validate()?;
    check_len("sinogram", geometry.measurement_len(), y.len())?;
    let nd = geometry.n_detectors;
    let tau = geometry.detector_spacing;
    let pad = (2 * nd).next_power_of_two();

    let mut kernel = vec![Complex::new(0.0, 0.0); pad];
    kernel[0].re = 1.0 / (4.0 * tau * tau);
    for k in 1..nd {
        if k % 2 == 1 {
            let v = -1.0 / (PI * PI * (k * k) as f64 * tau * tau);
            kernel[k].re = v;
            kernel[pad - k].re = v;
        }
    }
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(pad);
    let inverse = planner.plan_fft_inverse(pad);
    forward.process(&mut kernel);

    let mut filtered = vec![0.0; y.len()];
    let mut buf = vec![Complex::new(0.0, 0.0); pad];
    for k in 0..geometry.n_angles {
        let proj = &y.data[k * nd..(k + 1) * nd];
        buf.iter_mut().for_each(|v| *v = Complex::new(0.0, 0.0));
        for (b, &p) in buf.iter_mut().zip(proj) {
            b.re = p;
        }
        forward.process(&mut buf);
        for (b, h) in buf.iter_mut().zip(&kernel) {
            *b *= h;
        }
        inverse.process(&mut buf);
        // rustfft leaves the inverse unnormalised.
        let norm = tau / pad as f64;
        for (f, b) in filtered[k * nd..(k + 1) * nd].iter_mut().zip(&buf) {
            *f = b.re * norm;
        }
    }

    let centre = (nd as f64 - 1.0) / 2.0;
    let weight = PI / geometry.n_angles as f64;
    let mut out = vec![0.0; height * width];
    for (k, angle) in geometry.angles().into_iter().enumerate() {
        let (sin, cos) = angle.sin_cos();
        let q = &filtered[k * nd..(k + 1) * nd];
        for r in 0..height {
            let cy = height as f64 / 2.0 - r as f64 - 0.5;
            for c in 0..width {
                let cx = c as f64 - width as f64 / 2.0 + 0.5;
                let u = (-cx * sin + cy * cos) / tau + centre;
                let i0 = u.floor();
                let frac = u - i0;
                let i0 = i0 as isize;
                let sample = |i: isize| {
                    if i >= 0 && (i as usize) < nd {
                        q[i as usize]
                    } else {
                        0.0
                    }
                };
                out[r * width + c] += weight * ((1.0 - frac) * sample(i0) + frac * sample(i0 + 1));
            }
        }
    }
    for v in &mut out {
        if !v.is_finite() {
            *v = 0.0;
        }
    }
    Ok(Image {
        height,
        width,
        data: out,
    })
}
