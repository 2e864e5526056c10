use nalgebra::DMatrix;

use super::TrajectoryStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SvdResult {
    /// `d_θ x k` with orthonormal columns.
    pub u: DMatrix<f64>,
    /// Non-increasing singular values, length `k`.
    pub s: Vec<f64>,
    /// Set when fewer than the requested `d_sub` directions were
    /// numerically non-zero.
    pub rank_deficient: bool,
}

/// Singular triplets of a small dense matrix, sorted by decreasing singular
/// value.
fn sorted_svd(m: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let svd = m.svd(true, false);
    let u = svd.u.expect("requested U");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let mut us = DMatrix::zeros(u.nrows(), order.len());
    for (dst, &src) in order.iter().enumerate() {
        us.set_column(dst, &u.column(src));
    }
    (us, order.iter().map(|&i| s[i]).collect())
}

/// Thin SVD through a QR factorisation for tall inputs; returns all
/// `min(m, n)` left singular vectors.
fn thin_svd(m: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    if m.nrows() >= m.ncols() {
        let qr = m.qr();
        let (q, r) = (qr.q(), qr.r());
        let (ur, s) = sorted_svd(r);
        (q * ur, s)
    } else {
        let (u, s) = sorted_svd(m);
        let k = s.len();
        (u.columns(0, k).into_owned(), s)
    }
}

fn rank_tolerance(s: &[f64], rows: usize, cols: usize) -> f64 {
    s.first().copied().unwrap_or(0.0) * rows.max(cols) as f64 * f64::EPSILON
}

/// Top-`d_sub` SVD of a dense `d_θ x d_pre` matrix.
pub(crate) fn truncated_svd(m: DMatrix<f64>, d_sub: usize) -> Result<SvdResult> {
    let (rows, cols) = m.shape();
    if d_sub == 0 || d_sub > rows.min(cols) {
        return Err(Error::Config(format!(
            "d_sub = {d_sub} must lie in [1, min(d_theta, d_pre) = {}]",
            rows.min(cols)
        )));
    }
    let (u, s) = thin_svd(m);
    let tol = rank_tolerance(&s, rows, cols);
    let rank = s.iter().filter(|&&v| v > tol).count();
    let k = d_sub.min(rank);
    Ok(SvdResult {
        u: u.columns(0, k).into_owned(),
        s: s[..k].to_vec(),
        rank_deficient: k < d_sub,
    })
}

/// Top-`d_sub` SVD of the stacked trajectory checkpoints.
pub fn batch_svd(store: &TrajectoryStore, d_sub: usize) -> Result<SvdResult> {
    truncated_svd(store.to_matrix()?, d_sub)
}

/// Single-pass rank-`d_sub` SVD over a stream of vectors (Brand-style
/// update: project the incoming block on the current basis, orthonormalise
/// the residual, re-diagonalise the small core and truncate).
#[derive(Clone, Debug)]
pub struct IncrementalSvd {
    d_sub: usize,
    buffer_size: usize,
    d_theta: Option<usize>,
    u: DMatrix<f64>,
    s: Vec<f64>,
    buffer: Vec<Vec<f64>>,
    seen: usize,
    peak_floats: usize,
}

impl IncrementalSvd {
    pub fn new(d_sub: usize, buffer_size: usize) -> Result<Self> {
        if d_sub == 0 || buffer_size == 0 {
            return Err(Error::Config("d_sub and buffer size must be positive".into()));
        }
        Ok(IncrementalSvd {
            d_sub,
            buffer_size,
            d_theta: None,
            u: DMatrix::zeros(0, 0),
            s: Vec::new(),
            buffer: Vec::with_capacity(buffer_size),
            seen: 0,
            peak_floats: 0,
        })
    }

    pub fn push(&mut self, v: &[f64]) -> Result<()> {
        match self.d_theta {
            None => self.d_theta = Some(v.len()),
            Some(d) => crate::error::check_len("streamed vector", d, v.len())?,
        }
        self.buffer.push(v.to_vec());
        self.seen += 1;
        self.note_resident(0);
        if self.buffer.len() == self.buffer_size {
            self.flush();
        }
        Ok(())
    }

    /// Largest number of `f64`s simultaneously held in tall
    /// (`d_θ`-row) matrices: the basis, the input buffer and update
    /// temporaries.
    pub fn peak_resident_floats(&self) -> usize {
        self.peak_floats
    }

    fn note_resident(&mut self, extra_cols: usize) {
        let d = self.d_theta.unwrap_or(0);
        let cols = self.u.ncols() + self.buffer.len() + extra_cols;
        self.peak_floats = self.peak_floats.max(d * cols);
    }

    fn flush(&mut self) {
        if self.buffer.is_empty() {
            return;
        }
        let d = self.d_theta.expect("set by push");
        let b = self.buffer.len();
        let mut c = DMatrix::zeros(d, b);
        for (j, v) in self.buffer.iter().enumerate() {
            c.column_mut(j).copy_from_slice(v);
        }
        self.note_resident(b);
        self.buffer.clear();

        if self.u.ncols() == 0 {
            let (u, s) = thin_svd(c);
            let k = self.d_sub.min(s.len());
            self.u = u.columns(0, k).into_owned();
            self.s = s[..k].to_vec();
            return;
        }
        let k = self.u.ncols();
        // Project twice so the residual is orthogonal to U to working
        // precision.
        let mut l = self.u.transpose() * &c;
        let mut h = c - &self.u * &l;
        let l2 = self.u.transpose() * &h;
        h -= &self.u * &l2;
        l += l2;
        self.note_resident(2 * b);
        let qr = h.qr();
        let (j, kk) = (qr.q(), qr.r());
        let jb = j.ncols();

        let mut core = DMatrix::zeros(k + jb, k + b);
        for i in 0..k {
            core[(i, i)] = self.s[i];
        }
        core.view_mut((0, k), (k, b)).copy_from(&l);
        core.view_mut((k, k), (jb, b)).copy_from(&kk);
        let (uc, sc) = sorted_svd(core);
        let keep = self.d_sub.min(sc.len());
        let new_u = &self.u * uc.view((0, 0), (k, keep)) + &j * uc.view((k, 0), (jb, keep));
        self.note_resident(jb + keep);
        self.u = new_u;
        self.s = sc[..keep].to_vec();
    }

    pub fn finish(mut self) -> SvdResult {
        self.flush();
        let rows = self.d_theta.unwrap_or(0);
        let tol = rank_tolerance(&self.s, rows, self.seen);
        let rank = self.s.iter().filter(|&&v| v > tol).count();
        let k = self.s.len().min(rank);
        SvdResult {
            u: self.u.columns(0, k).into_owned(),
            s: self.s[..k].to_vec(),
            rank_deficient: k < self.d_sub,
        }
    }
}

/// Streams `vectors` through an [`IncrementalSvd`].
pub fn incremental_svd<I>(vectors: I, d_sub: usize, buffer_size: usize) -> Result<(SvdResult, usize)>
where
    I: IntoIterator<Item = Result<Vec<f64>>>,
{
    let mut inc = IncrementalSvd::new(d_sub, buffer_size)?;
    for v in vectors {
        inc.push(&v?)?;
    }
    if inc.seen < d_sub {
        return Err(Error::Config(format!(
            "stream of {} vectors is shorter than d_sub = {d_sub}",
            inc.seen
        )));
    }
    let peak = inc.peak_resident_floats();
    Ok((inc.finish(), peak))
}

/// Principal angles (radians, ascending) between the column spaces of two
/// matrices with orthonormal columns.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let m = a.transpose() * b;
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s.into_iter().map(|c| c.clamp(-1.0, 1.0).acos()).collect()
}
