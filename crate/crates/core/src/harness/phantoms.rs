use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::Image;
use crate::rng::{stream, stream_rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    Ellipses,
    Piecewise,
    Disc,
}

/// Synthetic ground-truth family. Images live on the square `[-1, 1]²`
/// sampled at pixel centres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    /// Fixed number of shapes (ellipses) or regions (piecewise). Drawn per
    /// image when absent: 3 to 8 ellipses, 4 to 10 regions.
    #[serde(default)]
    pub shapes: Option<usize>,
    pub size: usize,
    #[serde(default = "intensity")]
    pub intensity: [f64; 2],
    #[serde(default)]
    pub seed: u64,
}

fn intensity() -> [f64; 2] {
    [0.1, 1.0]
}

impl PhantomSpec {
    pub fn new(kind: PhantomKind, size: usize, seed: u64) -> Self {
        PhantomSpec {
            kind,
            shapes: None,
            size,
            intensity: intensity(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.intensity;
        if self.size == 0 {
            return Err(Error::Config("phantom size must be positive".into()));
        }
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "phantom intensity range [{lo}, {hi}] must lie in [0, 1]"
            )));
        }
        if self.kind == PhantomKind::Piecewise && self.shapes == Some(0) {
            return Err(Error::Config("piecewise phantoms need at least one region".into()));
        }
        Ok(())
    }

    /// Endless deterministic stream of phantoms.
    pub fn stream(&self) -> Result<PhantomStream> {
        self.validate()?;
        Ok(PhantomStream {
            spec: *self,
            rng: stream_rng(self.seed, stream::PHANTOM),
        })
    }

    /// The first `n` phantoms of [`PhantomSpec::stream`].
    pub fn generate(&self, n: usize) -> Result<Vec<Image>> {
        Ok(self.stream()?.take(n).collect())
    }
}

pub struct PhantomStream {
    spec: PhantomSpec,
    rng: ChaCha8Rng,
}

impl Iterator for PhantomStream {
    type Item = Image;

    fn next(&mut self) -> Option<Image> {
        let s = &self.spec;
        let rng = &mut self.rng;
        Some(match s.kind {
            PhantomKind::Ellipses => {
                let n = s.shapes.unwrap_or_else(|| rng.random_range(3..=8));
                ellipses(s.size, n, s.intensity, rng)
            }
            PhantomKind::Piecewise => {
                let n = s.shapes.unwrap_or_else(|| rng.random_range(4..=10));
                piecewise(s.size, n, s.intensity, rng)
            }
            PhantomKind::Disc => disc(s.size, s.intensity, rng),
        })
    }
}

/// Coordinates of pixel `(i, j)` on `[-1, 1]²`, `y` pointing up.
fn coords(size: usize, i: usize, j: usize) -> (f64, f64) {
    let h = 2.0 / size as f64;
    (-1.0 + (j as f64 + 0.5) * h, 1.0 - (i as f64 + 0.5) * h)
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Rotated filled ellipse.
#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random(rng: &mut ChaCha8Rng, axes: (f64, f64)) -> Self {
        let phi = rng.random_range(0.0..PI);
        Ellipse {
            cx: rng.random_range(-0.6..0.6),
            cy: rng.random_range(-0.6..0.6),
            a: rng.random_range(axes.0..axes.1),
            b: rng.random_range(axes.0..axes.1),
            cos: phi.cos(),
            sin: phi.sin(),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Sum of `n` random ellipses, clipped to `[0, 1]`.
fn ellipses(size: usize, n: usize, range: [f64; 2], rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::zeros(size, size);
    for _ in 0..n {
        let e = Ellipse::random(rng, (0.05, 0.4));
        let v = uniform(rng, range);
        for i in 0..size {
            for j in 0..size {
                let (x, y) = coords(size, i, j);
                if e.contains(x, y) {
                    *img.at_mut(i, j) += v;
                }
            }
        }
    }
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

enum Region {
    Ellipse(Ellipse),
    /// Convex polygon with counter-clockwise vertices.
    Polygon(Vec<(f64, f64)>),
}

impl Region {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Region::Ellipse(e) => e.contains(x, y),
            Region::Polygon(p) => (0..p.len()).all(|k| {
                let (a, b) = (p[k], p[(k + 1) % p.len()]);
                (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0) >= 0.0
            }),
        }
    }
}

/// A background level overpainted by `n - 1` flat discs and convex
/// polygons, so at most `n` distinct levels occur.
fn piecewise(size: usize, n: usize, range: [f64; 2], rng: &mut ChaCha8Rng) -> Image {
    let background = uniform(rng, [range[0], range[0] + 0.25 * (range[1] - range[0])]);
    let mut img = Image::filled(size, size, background);
    for _ in 1..n {
        let region = if rng.random_bool(0.5) {
            Region::Ellipse(Ellipse::random(rng, (0.1, 0.5)))
        } else {
            let (cx, cy) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let r = rng.random_range(0.15..0.5);
            let k = rng.random_range(3..=6);
            let start = rng.random_range(0.0..2.0 * PI);
            // Sorted angles give a convex, counter-clockwise polygon.
            let mut angles: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            angles.sort_by(f64::total_cmp);
            Region::Polygon(
                angles
                    .into_iter()
                    .map(|t| (cx + r * (start + t).cos(), cy + r * (start + t).sin()))
                    .collect(),
            )
        };
        let v = uniform(rng, range);
        for i in 0..size {
            for j in 0..size {
                let (x, y) = coords(size, i, j);
                if region.contains(x, y) {
                    *img.at_mut(i, j) = v;
                }
            }
        }
    }
    img
}

/// One flat disc on a zero background.
fn disc(size: usize, range: [f64; 2], rng: &mut ChaCha8Rng) -> Image {
    let (cx, cy) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let r = rng.random_range(0.2..0.6);
    let v = uniform(rng, range);
    let mut img = Image::zeros(size, size);
    for i in 0..size {
        for j in 0..size {
            let (x, y) = coords(size, i, j);
            if (x - cx).powi(2) + (y - cy).powi(2) <= r * r {
                *img.at_mut(i, j) = v;
            }
        }
    }
    img
}
