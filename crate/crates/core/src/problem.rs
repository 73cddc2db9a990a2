//! Synthetic problem instances: measurement matrices, Bernoulli-Gaussian
//! signals and noisy measurements `y = A x + n`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{child_seed, stream_rng, Stream};

/// SNR at or above this many dB is treated as noiseless.
pub const NOISELESS_SNR_DB: f64 = 300.0;

/// Largest matrix we agree to allocate, in entries.
const MAX_ENTRIES: usize = 1 << 31;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    /// Entries i.i.d. `N(0, 1/M)`.
    IidGaussian,
    /// Haar-random singular vectors, geometric singular values with ratio
    /// `kappa`, scaled to `||A||_F^2 = N`.
    Conditioned { kappa: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProblemConfig {
    /// Signal dimension N.
    pub n_cols: usize,
    /// Measurement dimension M.
    pub n_rows: usize,
    /// Probability that a signal entry is nonzero.
    pub sparsity_rate: f64,
    pub snr_db: f64,
    pub matrix_kind: MatrixKind,
    pub seed: u64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            n_cols: 500,
            n_rows: 250,
            sparsity_rate: 0.1,
            snr_db: 40.0,
            matrix_kind: MatrixKind::IidGaussian,
            seed: 1,
        }
    }
}

impl ProblemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cols == 0 || self.n_rows == 0 {
            return Err(Error::InvalidParameter(
                "matrix dimensions must be positive".into(),
            ));
        }
        match self.n_cols.checked_mul(self.n_rows) {
            Some(entries) if entries <= MAX_ENTRIES => {}
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "{}x{} matrix is too large",
                    self.n_rows, self.n_cols
                )))
            }
        }
        validate_rate(self.sparsity_rate)?;
        if self.snr_db.is_nan() {
            return Err(Error::InvalidParameter("snr_db is NaN".into()));
        }
        if let MatrixKind::Conditioned { kappa } = self.matrix_kind {
            if !(kappa.is_finite() && kappa > 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "condition number must be finite and > 1, got {kappa}"
                )));
            }
            if self.n_rows.min(self.n_cols) < 2 {
                return Err(Error::InvalidParameter(
                    "a conditioned matrix needs at least two singular values".into(),
                ));
            }
        }
        Ok(())
    }

    /// Noise variance giving `E||Ax||^2 / E||n||^2 = 10^(snr_db/10)`, using
    /// `E||Ax||^2 = gamma * N` (exact whenever `||A||_F^2 = N`).
    pub fn noise_variance(&self) -> f64 {
        noise_variance(self.sparsity_rate, self.n_cols, self.n_rows, self.snr_db)
    }
}

fn validate_rate(rate: f64) -> Result<()> {
    if rate > 0.0 && rate < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "sparsity rate must lie strictly inside (0, 1), got {rate}"
        )))
    }
}

pub fn noise_variance(sparsity_rate: f64, n_cols: usize, n_rows: usize, snr_db: f64) -> f64 {
    if snr_db >= NOISELESS_SNR_DB {
        return 0.0;
    }
    sparsity_rate * n_cols as f64 / (n_rows as f64 * 10f64.powf(snr_db / 10.0))
}

/// A measurement matrix together with the configuration that produced it.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub matrix: DMatrix<f64>,
    pub config: ProblemConfig,
    /// `||A||_2^2`.
    pub spectral_norm_sq: f64,
}

impl ProblemInstance {
    /// Wraps an existing matrix; `config` dimensions must agree with it.
    pub fn from_matrix(matrix: DMatrix<f64>, config: ProblemConfig) -> Result<Self> {
        check_dim("matrix rows", config.n_rows, matrix.nrows())?;
        check_dim("matrix columns", config.n_cols, matrix.ncols())?;
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("measurement matrix"));
        }
        let spectral_norm_sq = singular_values(&matrix).max().powi(2);
        Ok(Self {
            matrix,
            config,
            spectral_norm_sq,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.matrix.ncols()
    }

    /// Draws `batch` fresh signal/measurement pairs at the configured SNR.
    pub fn sample(&self, batch: usize, seed: u64) -> Result<SampleBatch> {
        let signals = gen_signals(
            self.n_cols(),
            batch,
            self.config.sparsity_rate,
            child_seed(seed, Stream::Signals as u64),
        )?;
        gen_measurements(
            self,
            signals,
            self.config.snr_db,
            child_seed(seed, Stream::Noise as u64),
        )
    }
}

/// Paired signals (columns of an N×D matrix) and measurements (M×D).
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub signals: DMatrix<f64>,
    pub measurements: DMatrix<f64>,
    pub noise_variance: f64,
}

impl SampleBatch {
    pub fn new(signals: DMatrix<f64>, measurements: DMatrix<f64>, noise_variance: f64) -> Result<Self> {
        if signals.ncols() == 0 {
            return Err(Error::InvalidParameter("batch must hold at least one column".into()));
        }
        check_dim("batch columns", signals.ncols(), measurements.ncols())?;
        if !(noise_variance >= 0.0) {
            return Err(Error::InvalidParameter("noise variance must be >= 0".into()));
        }
        Ok(Self {
            signals,
            measurements,
            noise_variance,
        })
    }

    pub fn len(&self) -> usize {
        self.signals.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.ncols() == 0
    }

    /// `count` columns starting at `start`, as a new batch.
    pub fn columns(&self, start: usize, count: usize) -> SampleBatch {
        SampleBatch {
            signals: self.signals.columns(start, count).into_owned(),
            measurements: self.measurements.columns(start, count).into_owned(),
            noise_variance: self.noise_variance,
        }
    }
}

pub fn gen_matrix(config: &ProblemConfig) -> Result<ProblemInstance> {
    config.validate()?;
    let (m, n) = (config.n_rows, config.n_cols);
    let mut rng = stream_rng(config.seed, Stream::Matrix);
    let matrix = match config.matrix_kind {
        MatrixKind::IidGaussian => {
            let dist = Normal::new(0.0, 1.0 / (m as f64).sqrt()).expect("positive std");
            DMatrix::from_fn(m, n, |_, _| dist.sample(&mut rng))
        }
        MatrixKind::Conditioned { kappa } => conditioned_matrix(m, n, kappa, &mut rng),
    };
    ProblemInstance::from_matrix(matrix, config.clone())
}

fn conditioned_matrix(m: usize, n: usize, kappa: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let rank = m.min(n);
    let u = haar_columns(m, rank, rng);
    let v = haar_columns(n, rank, rng);
    let ratio = kappa.powf(-1.0 / (rank - 1) as f64);
    let mut s: Vec<f64> = (0..rank).map(|i| ratio.powi(i as i32)).collect();
    // Global scale so that sum s_i^2 = ||A||_F^2 = N.
    let energy: f64 = s.iter().map(|x| x * x).sum();
    let scale = (n as f64 / energy).sqrt();
    s.iter_mut().for_each(|x| *x *= scale);
    let mut us = u;
    for (j, sj) in s.iter().enumerate() {
        us.column_mut(j).scale_mut(*sj);
    }
    us * v.transpose()
}

/// `rows × cols` matrix with orthonormal columns, uniformly distributed:
/// QR of a Gaussian matrix with the signs of `R`'s diagonal folded into `Q`.
fn haar_columns(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(rows, cols, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Bernoulli-Gaussian signals: each entry is zero with probability
/// `1 - sparsity_rate`, otherwise standard normal. Columns are drawn in order,
/// so a larger `batch` extends a smaller one with the same seed.
pub fn gen_signals(n_cols: usize, batch: usize, sparsity_rate: f64, seed: u64) -> Result<DMatrix<f64>> {
    validate_rate(sparsity_rate)?;
    if n_cols == 0 || batch == 0 {
        return Err(Error::InvalidParameter("signal dimension and batch must be positive".into()));
    }
    let mut rng = stream_rng(seed, Stream::Signals);
    let mut x = DMatrix::zeros(n_cols, batch);
    for d in 0..batch {
        for j in 0..n_cols {
            let active = rng.random::<f64>() < sparsity_rate;
            let value: f64 = rng.sample(StandardNormal);
            if active {
                x[(j, d)] = value;
            }
        }
    }
    Ok(x)
}

/// `y = A x + n` with `n ~ N(0, v I)`, `v` from [`noise_variance`].
pub fn gen_measurements(
    instance: &ProblemInstance,
    signals: DMatrix<f64>,
    snr_db: f64,
    seed: u64,
) -> Result<SampleBatch> {
    check_dim("signal rows", instance.n_cols(), signals.nrows())?;
    let v = noise_variance(
        instance.config.sparsity_rate,
        instance.n_cols(),
        instance.n_rows(),
        snr_db,
    );
    let mut y = &instance.matrix * &signals;
    if v > 0.0 {
        let mut rng = stream_rng(seed, Stream::Noise);
        let std = v.sqrt();
        for d in 0..y.ncols() {
            for i in 0..y.nrows() {
                let e: f64 = rng.sample(StandardNormal);
                y[(i, d)] += std * e;
            }
        }
    }
    SampleBatch::new(signals, y, v)
}

pub fn singular_values(a: &DMatrix<f64>) -> DVector<f64> {
    a.clone().svd(false, false).singular_values
}

/// Ratio of the largest to the smallest nonzero-rank singular value.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let s = singular_values(a);
    s.max() / s.min()
}
