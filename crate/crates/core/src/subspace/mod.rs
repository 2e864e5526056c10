//! Low-dimensional parameter subspaces extracted from a pre-training
//! trajectory.
//!
//! Checkpoints are stacked raw into `Θ (d_θ x d_pre)`, the top `d_sub` left
//! singular vectors `U` are kept, and rows of `U` outside the `d_lev`
//! largest leverage scores are zeroed. Reconstruction then moves only along
//! `θ = θ_pre + MU c`.

mod pretrain;
mod svd;

pub use pretrain::{checkpoint_steps, pretrain, PretrainConfig, PretrainOutput, TrainingPair, TrajectoryStore};
pub use svd::{batch_svd, incremental_svd, principal_angles, IncrementalSvd, SvdResult};

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::io::{self, Triplet};
use crate::linalg::gemm;
use crate::network::ParamVector;
use crate::rng::{normal_vec, stream, stream_rng};

/// `MU`: a `d_θ x d_sub` basis that is non-zero only on `support` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseBasis {
    d_theta: usize,
    d_sub: usize,
    support: Vec<u32>,
    /// `support.len() x d_sub`, row-major.
    rows: Vec<f64>,
}

impl SparseBasis {
    pub fn new(d_theta: usize, d_sub: usize, support: Vec<u32>, rows: Vec<f64>) -> Result<Self> {
        check_len("basis rows", support.len() * d_sub, rows.len())?;
        if support.windows(2).any(|w| w[0] >= w[1]) || support.last().is_some_and(|&r| r as usize >= d_theta) {
            return Err(Error::Config("basis support must be sorted, unique and in range".into()));
        }
        Ok(SparseBasis {
            d_theta,
            d_sub,
            support,
            rows,
        })
    }

    /// Keeps every row of a dense column-major `U`.
    pub fn from_dense(u: &DMatrix<f64>) -> Self {
        let support: Vec<u32> = (0..u.nrows() as u32).collect();
        Self::from_rows_of(u, support)
    }

    fn from_rows_of(u: &DMatrix<f64>, support: Vec<u32>) -> Self {
        let d_sub = u.ncols();
        let mut rows = Vec::with_capacity(support.len() * d_sub);
        for &r in &support {
            for k in 0..d_sub {
                rows.push(u[(r as usize, k)]);
            }
        }
        SparseBasis {
            d_theta: u.nrows(),
            d_sub,
            support,
            rows,
        }
    }

    pub fn d_theta(&self) -> usize {
        self.d_theta
    }

    pub fn d_sub(&self) -> usize {
        self.d_sub
    }

    pub fn support(&self) -> &[u32] {
        &self.support
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().filter(|&&v| v != 0.0).count()
    }

    /// `out += MU c`
    pub fn expand_add(&self, c: &[f64], out: &mut [f64]) {
        for (i, &r) in self.support.iter().enumerate() {
            let row = &self.rows[i * self.d_sub..(i + 1) * self.d_sub];
            out[r as usize] += row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// `MU v` for `batch` coefficient vectors; returns `batch x d_θ`.
    pub fn expand_batch(&self, vs: &[f64], batch: usize) -> Vec<f64> {
        let mut out = vec![0.0; batch * self.d_theta];
        for b in 0..batch {
            self.expand_add(
                &vs[b * self.d_sub..(b + 1) * self.d_sub],
                &mut out[b * self.d_theta..(b + 1) * self.d_theta],
            );
        }
        out
    }

    /// `(MU)ᵀ g`
    pub fn project(&self, g: &[f64]) -> Vec<f64> {
        self.project_batch(g, 1)
    }

    /// `(MU)ᵀ g` for `batch` parameter-space vectors; returns `batch x d_sub`.
    pub fn project_batch(&self, gs: &[f64], batch: usize) -> Vec<f64> {
        let s = self.support.len();
        let mut gathered = vec![0.0; batch * s];
        for b in 0..batch {
            let g = &gs[b * self.d_theta..(b + 1) * self.d_theta];
            for (dst, &r) in gathered[b * s..(b + 1) * s].iter_mut().zip(&self.support) {
                *dst = g[r as usize];
            }
        }
        let mut out = vec![0.0; batch * self.d_sub];
        gemm(
            batch,
            s,
            self.d_sub,
            1.0,
            &gathered,
            s as isize,
            1,
            &self.rows,
            self.d_sub as isize,
            1,
            0.0,
            &mut out,
            self.d_sub as isize,
        );
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.d_theta, self.d_sub);
        for (i, &r) in self.support.iter().enumerate() {
            for k in 0..self.d_sub {
                m[(r as usize, k)] = self.rows[i * self.d_sub + k];
            }
        }
        m
    }

    /// Non-zero entries sorted by `(row, col)`.
    pub fn triplets(&self) -> Vec<Triplet> {
        let mut out = Vec::new();
        for (i, &r) in self.support.iter().enumerate() {
            for k in 0..self.d_sub {
                let v = self.rows[i * self.d_sub + k];
                if v != 0.0 {
                    out.push(Triplet {
                        row: r,
                        col: k as u32,
                        value: v,
                    });
                }
            }
        }
        out
    }

    /// Euclidean norm of every column.
    pub fn column_norms(&self) -> Vec<f64> {
        let mut n = vec![0.0; self.d_sub];
        for row in self.rows.chunks(self.d_sub.max(1)) {
            for (acc, v) in n.iter_mut().zip(row) {
                *acc += v * v;
            }
        }
        n.into_iter().map(f64::sqrt).collect()
    }
}

/// Row-wise squared norms `ℓ_i = Σ_k U[i,k]²`.
pub fn leverage_scores(u: &DMatrix<f64>) -> Vec<f64> {
    let mut scores = vec![0.0; u.nrows()];
    for col in u.column_iter() {
        for (s, v) in scores.iter_mut().zip(col.iter()) {
            *s += v * v;
        }
    }
    scores
}

/// Indices of the `d_lev` largest scores, ties broken towards the lower
/// index, returned in ascending order.
pub fn top_indices(scores: &[f64], d_lev: usize) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..scores.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        scores[b as usize]
            .total_cmp(&scores[a as usize])
            .then(a.cmp(&b))
    });
    idx.truncate(d_lev.min(scores.len()));
    idx.sort_unstable();
    idx
}

/// Keeps the rows of `U` with the `d_lev` largest leverage scores.
pub fn sparsify(u: &DMatrix<f64>, d_lev: usize) -> Result<SparseBasis> {
    if d_lev == 0 || d_lev > u.nrows() {
        return Err(Error::Config(format!(
            "d_lev must lie in [1, {}], got {d_lev}",
            u.nrows()
        )));
    }
    let support = top_indices(&leverage_scores(u), d_lev);
    Ok(SparseBasis::from_rows_of(u, support))
}

/// Anchor point, sparse basis and spectrum of a parameter subspace.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceModel {
    pub theta_pre: ParamVector,
    pub basis: SparseBasis,
    pub singular_values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    d_theta: usize,
    d_sub: usize,
    d_lev: usize,
    singular_values: Vec<f64>,
}

impl SubspaceModel {
    pub fn new(theta_pre: ParamVector, basis: SparseBasis, singular_values: Vec<f64>) -> Result<Self> {
        check_len("basis height", theta_pre.len(), basis.d_theta())?;
        check_len("singular values", basis.d_sub(), singular_values.len())?;
        Ok(SubspaceModel {
            theta_pre,
            basis,
            singular_values,
        })
    }

    pub fn d_sub(&self) -> usize {
        self.basis.d_sub()
    }

    pub fn d_lev(&self) -> usize {
        self.basis.support().len()
    }

    pub fn d_theta(&self) -> usize {
        self.theta_pre.len()
    }

    /// `γ(c) = θ_pre + MU c`
    pub fn gamma(&self, c: &[f64]) -> Result<ParamVector> {
        check_len("subspace coefficients", self.d_sub(), c.len())?;
        let mut theta = self.theta_pre.clone();
        self.basis.expand_add(c, &mut theta.data);
        Ok(theta)
    }

    /// Writes `manifest.toml`, `theta_pre.sdip`, `support.sdip` and
    /// `basis.coo` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            d_theta: self.d_theta(),
            d_sub: self.d_sub(),
            d_lev: self.d_lev(),
            singular_values: self.singular_values.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        let path = dir.join("manifest.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        io::write_checkpoint(&dir.join("theta_pre.sdip"), &self.theta_pre)?;
        // The support is part of the model even where basis entries vanish,
        // so it is stored alongside the triplets.
        let support: Vec<f64> = self.basis.support().iter().map(|&r| r as f64).collect();
        io::write_sdip(&dir.join("support.sdip"), support.len(), 1, &support, "")?;
        io::write_coo(&dir.join("basis.coo"), &self.basis.triplets())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.toml");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let theta_pre = io::read_checkpoint(&dir.join("theta_pre.sdip"))?;
        check_len("manifest d_theta", manifest.d_theta, theta_pre.len())?;
        let support: Vec<u32> = io::read_sdip(&dir.join("support.sdip"))?
            .data
            .into_iter()
            .map(|v| v as u32)
            .collect();
        check_len("manifest d_lev", manifest.d_lev, support.len())?;
        let mut rows = vec![0.0; support.len() * manifest.d_sub];
        for t in io::read_coo(&dir.join("basis.coo"))? {
            let i = support
                .binary_search(&t.row)
                .map_err(|_| Error::format(dir, format!("triplet row {} outside support", t.row)))?;
            if t.col as usize >= manifest.d_sub {
                return Err(Error::format(dir, "triplet column out of range"));
            }
            rows[i * manifest.d_sub + t.col as usize] = t.value;
        }
        let basis = SparseBasis::new(manifest.d_theta, manifest.d_sub, support, rows)?;
        SubspaceModel::new(theta_pre, basis, manifest.singular_values)
    }
}

/// Draws `c` uniformly on the unit sphere.
pub fn init_coefficients(d_sub: usize, seed: u64) -> Result<Vec<f64>> {
    if d_sub == 0 {
        return Err(Error::Config("d_sub must be at least 1".into()));
    }
    let mut rng = stream_rng(seed, stream::COEFFS);
    loop {
        let c = normal_vec(&mut rng, d_sub);
        let n = crate::linalg::norm(&c);
        if n > 0.0 {
            return Ok(c.into_iter().map(|v| v / n).collect());
        }
    }
}

/// Random `d_θ x d_sub` Gaussian basis with unit-norm columns, optionally
/// orthonormalised, used as an uninformed baseline against trajectory
/// bases.
pub fn random_basis(d_theta: usize, d_sub: usize, orthonormal: bool, seed: u64) -> DMatrix<f64> {
    let mut rng = stream_rng(seed, stream::RANDOM_BASIS);
    let vals = normal_vec(&mut rng, d_theta * d_sub);
    let mut m = DMatrix::from_column_slice(d_theta, d_sub, &vals);
    if orthonormal {
        m = m.qr().q();
    }
    normalise_columns(&mut m);
    m
}

pub(crate) fn normalise_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= n;
        }
    }
}

/// Sparsifies a random basis like a trajectory basis, then restores unit
/// column norms (orthonormal columns when `orthonormal` is set) on the
/// retained support.
pub fn random_sparse_basis(
    d_theta: usize,
    d_sub: usize,
    d_lev: usize,
    orthonormal: bool,
    seed: u64,
) -> Result<SparseBasis> {
    let dense = random_basis(d_theta, d_sub, orthonormal, seed);
    let masked = sparsify(&dense, d_lev)?;
    let support = masked.support().to_vec();
    let mut block = DMatrix::from_row_slice(support.len(), d_sub, &masked.rows);
    if orthonormal && support.len() >= d_sub {
        block = block.qr().q();
    }
    normalise_columns(&mut block);
    let mut rows = Vec::with_capacity(support.len() * d_sub);
    for i in 0..support.len() {
        for k in 0..d_sub {
            rows.push(block[(i, k)]);
        }
    }
    SparseBasis::new(d_theta, d_sub, support, rows)
}

/// Builds a subspace model from an SVD result.
pub fn build_model(theta_pre: ParamVector, svd: &SvdResult, d_lev: usize) -> Result<SubspaceModel> {
    let basis = sparsify(&svd.u, d_lev)?;
    SubspaceModel::new(theta_pre, basis, svd.s.clone())
}
