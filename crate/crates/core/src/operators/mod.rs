//! Forward models and their adjoints.
//!
//! Every operator is stored as an explicit matrix, assembled once and then
//! shared read-only. Small operators are kept dense; anything above
//! [`AssemblyOptions::dense_threshold`] entries is kept in compressed rows.

mod blur;
mod noise;
mod tomography;

pub use blur::gaussian_blur_operator;
pub use noise::{add_noise, NoiseModel};
pub use tomography::{assemble_parallel_beam, fbp, ParallelBeamGeometry};

use crate::error::{check_len, Error, Result};

/// Dense grayscale image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_len("image data", height * width, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("image contains non-finite values".into()));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut f64 {
        &mut self.data[row * self.width + col]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Measurement vector `y`: a flattened sinogram (angle-major) or a degraded
/// image.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub data: Vec<f64>,
}

impl Measurement {
    pub fn new(data: Vec<f64>) -> Self {
        Measurement { data }
    }

    pub fn zeros(len: usize) -> Self {
        Measurement {
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OperatorKind {
    Tomography {
        geometry: ParallelBeamGeometry,
        height: usize,
        width: usize,
    },
    Blur {
        kappa: f64,
        height: usize,
        width: usize,
    },
    Identity {
        height: usize,
        width: usize,
    },
}

/// Compressed sparse rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<u32>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Builds from per-column `(row, value)` lists, i.e. the order in which
    /// column-wise assembly produces them.
    pub(crate) fn from_columns(rows: usize, columns: &[Vec<(u32, f64)>]) -> Self {
        let mut counts = vec![0usize; rows + 1];
        for col in columns {
            for &(r, _) in col {
                counts[r as usize + 1] += 1;
            }
        }
        for i in 0..rows {
            counts[i + 1] += counts[i];
        }
        let nnz = counts[rows];
        let mut next = counts.clone();
        let mut col_idx = vec![0u32; nnz];
        let mut values = vec![0.0; nnz];
        // Columns are visited in ascending order, so each row ends up sorted.
        for (j, col) in columns.iter().enumerate() {
            for &(r, v) in col {
                let slot = next[r as usize];
                col_idx[slot] = j as u32;
                values[slot] = v;
                next[r as usize] += 1;
            }
        }
        Csr {
            row_ptr: counts,
            col_idx,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    Dense(Vec<f64>),
    Sparse(Csr),
}

#[derive(Clone, Copy, Debug)]
pub struct AssemblyOptions {
    /// Operators with at most this many matrix entries are stored dense.
    pub dense_threshold: usize,
    /// Refuse to assemble when the stored entry count would exceed this.
    pub max_entries: usize,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        AssemblyOptions {
            dense_threshold: 10_000_000,
            max_entries: 200_000_000,
        }
    }
}

/// Explicit `rows x cols` forward model `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearOperator {
    rows: usize,
    cols: usize,
    storage: Storage,
    kind: OperatorKind,
}

impl LinearOperator {
    pub(crate) fn from_columns(
        rows: usize,
        columns: Vec<Vec<(u32, f64)>>,
        kind: OperatorKind,
        opts: &AssemblyOptions,
    ) -> Result<Self> {
        let cols = columns.len();
        let dense_entries = rows.saturating_mul(cols);
        let storage = if dense_entries <= opts.dense_threshold {
            if dense_entries > opts.max_entries {
                return Err(Error::MemoryBudget {
                    rows,
                    cols,
                    entries: dense_entries,
                    budget: opts.max_entries,
                });
            }
            let mut data = vec![0.0; dense_entries];
            for (j, col) in columns.iter().enumerate() {
                for &(r, v) in col {
                    data[r as usize * cols + j] = v;
                }
            }
            Storage::Dense(data)
        } else {
            let nnz: usize = columns.iter().map(Vec::len).sum();
            if nnz > opts.max_entries {
                return Err(Error::MemoryBudget {
                    rows,
                    cols,
                    entries: nnz,
                    budget: opts.max_entries,
                });
            }
            Storage::Sparse(Csr::from_columns(rows, &columns))
        };
        Ok(LinearOperator {
            rows,
            cols,
            storage,
            kind,
        })
    }

    pub fn identity(height: usize, width: usize) -> Self {
        let n = height * width;
        let columns: Vec<Vec<(u32, f64)>> = (0..n).map(|j| vec![(j as u32, 1.0)]).collect();
        // An identity never needs the dense path.
        let opts = AssemblyOptions {
            dense_threshold: 0,
            ..AssemblyOptions::default()
        };
        Self::from_columns(n, columns, OperatorKind::Identity { height, width }, &opts)
            .expect("identity fits any budget")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    /// Image shape of the operator's domain.
    pub fn image_shape(&self) -> (usize, usize) {
        match self.kind {
            OperatorKind::Tomography { height, width, .. }
            | OperatorKind::Blur { height, width, .. }
            | OperatorKind::Identity { height, width } => (height, width),
        }
    }

    /// Entry `(i, j)`; intended for tests and small operators.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        match &self.storage {
            Storage::Dense(d) => d[i * self.cols + j],
            Storage::Sparse(csr) => {
                let (lo, hi) = (csr.row_ptr[i], csr.row_ptr[i + 1]);
                match csr.col_idx[lo..hi].binary_search(&(j as u32)) {
                    Ok(k) => csr.values[lo + k],
                    Err(_) => 0.0,
                }
            }
        }
    }

    /// `out = A x`
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_len("operator input", self.cols, x.len())?;
        check_len("operator output", self.rows, out.len())?;
        match &self.storage {
            Storage::Dense(d) => {
                for (i, o) in out.iter_mut().enumerate() {
                    let row = &d[i * self.cols..(i + 1) * self.cols];
                    *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }
            Storage::Sparse(csr) => {
                for (i, o) in out.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for k in csr.row_ptr[i]..csr.row_ptr[i + 1] {
                        s += csr.values[k] * x[csr.col_idx[k] as usize];
                    }
                    *o = s;
                }
            }
        }
        Ok(())
    }

    /// `out = Aᵀ y`
    pub fn adjoint_into(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        check_len("adjoint input", self.rows, y.len())?;
        check_len("adjoint output", self.cols, out.len())?;
        out.iter_mut().for_each(|v| *v = 0.0);
        match &self.storage {
            Storage::Dense(d) => {
                for (i, &yi) in y.iter().enumerate() {
                    if yi == 0.0 {
                        continue;
                    }
                    let row = &d[i * self.cols..(i + 1) * self.cols];
                    for (o, a) in out.iter_mut().zip(row) {
                        *o += a * yi;
                    }
                }
            }
            Storage::Sparse(csr) => {
                for (i, &yi) in y.iter().enumerate() {
                    for k in csr.row_ptr[i]..csr.row_ptr[i + 1] {
                        out[csr.col_idx[k] as usize] += csr.values[k] * yi;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, x: &Image) -> Result<Measurement> {
        let mut out = vec![0.0; self.rows];
        self.apply_into(&x.data, &mut out)?;
        Ok(Measurement::new(out))
    }

    pub fn adjoint_apply(&self, y: &Measurement) -> Result<Image> {
        let (h, w) = self.image_shape();
        let mut out = vec![0.0; self.cols];
        self.adjoint_into(&y.data, &mut out)?;
        Ok(Image {
            height: h,
            width: w,
            data: out,
        })
    }

    /// Approximate pseudo-inverse used as the network input: FBP for
    /// tomography, the degraded image itself for restoration tasks.
    pub fn pseudo_inverse(&self, y: &Measurement) -> Result<Image> {
        match &self.kind {
            OperatorKind::Tomography {
                geometry,
                height,
                width,
            } => fbp(geometry, y, *height, *width),
            OperatorKind::Blur { height, width, .. } | OperatorKind::Identity { height, width } => {
                Image::new(*height, *width, y.data.clone())
            }
        }
    }
}
