//! Euclidean alignment of filter-banked trials.
//!
//! Each banded trial is flattened to a `(bands·channels) × samples` matrix
//! (band-major, then channel). The reference is the mean of `x xᵀ` over all
//! trials, and alignment left-multiplies every trial by its inverse square
//! root, so the aligned collection has identity mean covariance.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{invalid, shape, Error, Result};
use crate::preprocess::{EpochSet, Stage};

pub const DEFAULT_EIGEN_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentReference {
    pub mean_cov: DMatrix<f64>,
    pub inv_sqrt: DMatrix<f64>,
    pub eigen_floor: f64,
}

impl AlignmentReference {
    pub fn dim(&self) -> usize {
        self.mean_cov.nrows()
    }

    /// Reference that leaves data untouched.
    pub fn identity(dim: usize) -> Self {
        Self {
            mean_cov: DMatrix::identity(dim, dim),
            inv_sqrt: DMatrix::identity(dim, dim),
            eigen_floor: DEFAULT_EIGEN_FLOOR,
        }
    }
}

/// `V·diag(max(λ, floor·λmax)^(-1/2))·Vᵀ` for symmetric `m`.
pub fn inverse_sqrt_psd(m: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(shape(format!("{}×{} matrix is not square", m.nrows(), m.ncols())));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let asym = (m - m.transpose()).amax();
    if asym > 1e-9 * scale {
        return Err(invalid(format!("matrix is not symmetric (max asymmetry {asym})")));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.max();
    if !(lmax > 0.0) {
        return Err(invalid("largest eigenvalue is not positive"));
    }
    let clamp = floor * lmax;
    let d = eig.eigenvalues.map(|l| 1.0 / l.max(clamp).sqrt());
    let v = &eig.eigenvectors;
    let mut out = v * DMatrix::from_diagonal(&d) * v.transpose();
    // exact symmetry
    let t = out.transpose();
    out += t;
    out *= 0.5;
    Ok(out)
}

fn trial_matrix(epochs: &EpochSet, i: usize, rows: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, epochs.n_samples(), epochs.trial(i))
}

fn mean_cov_of(epochs: &EpochSet, rows: usize, pick: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Result<DMatrix<f64>> {
    if epochs.n_trials() == 0 {
        return Err(invalid("reference needs at least one trial"));
    }
    let mut acc = DMatrix::<f64>::zeros(rows, rows);
    for i in 0..epochs.n_trials() {
        let x = pick(&trial_matrix(epochs, i, epochs.n_bands() * epochs.n_channels()));
        acc.gemm(1.0, &x, &x.transpose(), 1.0);
    }
    acc /= epochs.n_trials() as f64;
    if acc.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mean covariance".into()));
    }
    Ok(acc)
}

/// Mean covariance over flattened banded trials and its inverse square root.
pub fn compute_reference(epochs: &EpochSet) -> Result<AlignmentReference> {
    compute_reference_with_floor(epochs, DEFAULT_EIGEN_FLOOR)
}

pub fn compute_reference_with_floor(epochs: &EpochSet, eigen_floor: f64) -> Result<AlignmentReference> {
    if epochs.stage() != Stage::Banded {
        return Err(invalid("alignment reference requires banded epochs"));
    }
    let d = epochs.n_bands() * epochs.n_channels();
    let mean_cov = mean_cov_of(epochs, d, |x| x.clone())?;
    let inv_sqrt = inverse_sqrt_psd(&mean_cov, eigen_floor)?;
    Ok(AlignmentReference {
        mean_cov,
        inv_sqrt,
        eigen_floor,
    })
}

/// Left-multiply every flattened trial by `ref.inv_sqrt`.
pub fn apply_alignment(epochs: &EpochSet, reference: &AlignmentReference) -> Result<EpochSet> {
    if epochs.stage() != Stage::Banded {
        return Err(invalid("alignment applies to banded epochs"));
    }
    let d = epochs.n_bands() * epochs.n_channels();
    if reference.dim() != d {
        return Err(shape(format!(
            "reference is {}×{0} but trials have {d} rows",
            reference.dim()
        )));
    }
    let mut out = Vec::with_capacity(epochs.data().len());
    for i in 0..epochs.n_trials() {
        let y = &reference.inv_sqrt * trial_matrix(epochs, i, d);
        out.extend(y.transpose().iter().copied());
    }
    epochs.with_data(out, epochs.dims(), Stage::Aligned)
}

/// Comparison preprocessing strategies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineMode {
    /// z-score every (band, channel) row of every trial
    ChannelNorm,
    /// z-score every trial as a whole
    TrialNorm,
    /// Euclidean alignment within each band separately
    ChannelEuclid,
}

fn zscore(x: &mut [f64]) -> Option<()> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return None;
    }
    let sd = var.sqrt();
    x.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    Some(())
}

pub fn baseline_normalize(epochs: &EpochSet, mode: BaselineMode) -> Result<EpochSet> {
    if epochs.stage() != Stage::Banded {
        return Err(invalid("baseline normalization applies to banded epochs"));
    }
    let [n, nb, nc, np] = epochs.dims();
    let mut data = epochs.data().to_vec();
    match mode {
        BaselineMode::ChannelNorm => {
            for (r, row) in data.chunks_mut(np).enumerate() {
                zscore(row).ok_or_else(|| {
                    invalid(format!(
                        "zero-variance row (trial {}, band {}, channel {})",
                        r / (nb * nc),
                        (r / nc) % nb,
                        r % nc
                    ))
                })?;
            }
        }
        BaselineMode::TrialNorm => {
            for (t, trial) in data.chunks_mut(nb * nc * np).enumerate() {
                zscore(trial).ok_or_else(|| invalid(format!("zero-variance trial {t}")))?;
            }
        }
        BaselineMode::ChannelEuclid => {
            for b in 0..nb {
                let band = move |x: &DMatrix<f64>| x.rows(b * nc, nc).into_owned();
                let cov = mean_cov_of(epochs, nc, band)?;
                let w = inverse_sqrt_psd(&cov, DEFAULT_EIGEN_FLOOR)?;
                for t in 0..n {
                    let off = (t * nb + b) * nc * np;
                    let x = DMatrix::from_row_slice(nc, np, &data[off..off + nc * np]);
                    let y = &w * x;
                    for (o, v) in data[off..off + nc * np].iter_mut().zip(y.transpose().iter()) {
                        *o = *v;
                    }
                }
            }
        }
    }
    epochs.with_data(data, [n, nb, nc, np], Stage::Aligned)
}

/// Mean of `x xᵀ` over (any-stage) flattened trials.
pub fn sample_mean_cov(epochs: &EpochSet) -> Result<DMatrix<f64>> {
    mean_cov_of(epochs, epochs.n_bands() * epochs.n_channels(), |x| x.clone())
}
