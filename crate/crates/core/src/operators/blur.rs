use super::{AssemblyOptions, LinearOperator, OperatorKind};
use crate::error::{Error, Result};

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - 1 - m) as usize
    } else {
        m as usize
    }
}

pub(crate) fn gaussian_kernel_1d(kappa: f64) -> Vec<f64> {
    let radius = (4.0 * kappa).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * kappa * kappa)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// 2-D Gaussian convolution with standard deviation `kappa` pixels, kernel
/// truncated at `ceil(4 kappa)` and normalised to unit sum, reflective
/// boundaries.
pub fn gaussian_blur_operator(
    kappa: f64,
    height: usize,
    width: usize,
    opts: &AssemblyOptions,
) -> Result<LinearOperator> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::Config(format!("blur std must be positive, got {kappa}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::Config("image dimensions must be positive".into()));
    }
    let g = gaussian_kernel_1d(kappa);
    let radius = (g.len() / 2) as isize;
    let n = height * width;

    // Row i of A holds the weights out[i] = Σ w · x[j]; build columns by
    // scattering each row's weights.
    let mut columns: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    let mut row_acc: Vec<(usize, f64)> = Vec::new();
    for r in 0..height {
        for c in 0..width {
            row_acc.clear();
            for (a, ga) in g.iter().enumerate() {
                let rr = reflect(r as isize + a as isize - radius, height);
                for (b, gb) in g.iter().enumerate() {
                    let cc = reflect(c as isize + b as isize - radius, width);
                    row_acc.push((rr * width + cc, ga * gb));
                }
            }
            row_acc.sort_by_key(|e| e.0);
            let i = (r * width + c) as u32;
            let mut k = 0;
            while k < row_acc.len() {
                let j = row_acc[k].0;
                let mut w = 0.0;
                while k < row_acc.len() && row_acc[k].0 == j {
                    w += row_acc[k].1;
                    k += 1;
                }
                columns[j].push((i, w));
            }
        }
    }
    LinearOperator::from_columns(
        n,
        columns,
        OperatorKind::Blur {
            kappa,
            height,
            width,
        },
        opts,
    )
}
