//! Error metrics, trajectories, QQ statistics, the AMP-calibrated LASSO
//! threshold and least-squares estimation of the measurement matrix.

use std::fmt;
use std::io::Write;

use nalgebra::DMatrix;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{check_dim, Error, Result};
use crate::problem::SampleBatch;
use crate::solvers::{run_solver_observed, SolverConfig};

/// NMSE reported for exact recovery, so CSVs stay finite.
pub const NMSE_FLOOR_DB: f64 = -150.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    Diverged,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Ok => "ok",
            Status::Diverged => "diverged",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEntry {
    pub t: usize,
    /// `None` when no ground truth was supplied.
    pub nmse_db: Option<f64>,
    pub v_norm: f64,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub label: String,
    pub entries: Vec<TrajectoryEntry>,
}

impl Trajectory {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, entry: TrajectoryEntry) {
        debug_assert!(self.entries.last().is_none_or(|e| e.t < entry.t));
        self.entries.push(entry);
    }

    pub fn status(&self) -> Status {
        if self.entries.iter().any(|e| e.status == Status::Diverged) {
            Status::Diverged
        } else {
            Status::Ok
        }
    }

    /// First `t` whose NMSE is at or below `level_db`.
    pub fn iterations_to(&self, level_db: f64) -> Option<usize> {
        self.entries
            .iter()
            .find(|e| e.nmse_db.is_some_and(|v| v <= level_db))
            .map(|e| e.t)
    }

    pub fn best_nmse_db(&self) -> Option<f64> {
        self.entries
            .iter()
            .filter_map(|e| e.nmse_db)
            .min_by(|a, b| a.total_cmp(b))
    }

    pub fn nmse_at(&self, t: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.t == t).and_then(|e| e.nmse_db)
    }

    /// CSV with columns `t,nmse_db,v_norm,status`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "t,nmse_db,v_norm,status")?;
        for e in &self.entries {
            let nmse = e.nmse_db.map(|v| v.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{}", e.t, nmse, e.v_norm, e.status)?;
        }
        Ok(())
    }
}

/// Averages per-realization trajectories at each `t`: NMSE is averaged on the
/// linear scale over the realizations still running at `t`; the status is
/// `Diverged` once any realization has diverged.
pub fn average_trajectories(label: &str, runs: &[Trajectory]) -> Trajectory {
    let len = runs.iter().map(|r| r.entries.len()).max().unwrap_or(0);
    let mut out = Trajectory::new(label);
    let mut any_diverged = false;
    for k in 0..len {
        let present: Vec<&TrajectoryEntry> = runs.iter().filter_map(|r| r.entries.get(k)).collect();
        any_diverged |= present.iter().any(|e| e.status == Status::Diverged);
        let ratios: Vec<f64> = present
            .iter()
            .filter_map(|e| e.nmse_db)
            .map(|db| 10f64.powf(db / 10.0))
            .collect();
        let nmse_db = (!ratios.is_empty())
            .then(|| ratio_to_db(ratios.iter().sum::<f64>() / ratios.len() as f64));
        let v_norm = present.iter().map(|e| e.v_norm).sum::<f64>() / present.len() as f64;
        out.push(TrajectoryEntry {
            t: present[0].t,
            nmse_db,
            v_norm,
            status: if any_diverged { Status::Diverged } else { Status::Ok },
        });
    }
    out
}

pub fn ratio_to_db(ratio: f64) -> f64 {
    if ratio > 0.0 {
        (10.0 * ratio.log10()).max(NMSE_FLOOR_DB)
    } else {
        NMSE_FLOOR_DB
    }
}

/// Per-column `||x_hat - x||^2 / ||x||^2`.
pub fn nmse_ratios(x_hat: &DMatrix<f64>, x_true: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_dim("estimate rows", x_true.nrows(), x_hat.nrows())?;
    check_dim("estimate columns", x_true.ncols(), x_hat.ncols())?;
    x_true
        .column_iter()
        .zip(x_hat.column_iter())
        .map(|(x, xh)| {
            let energy = x.norm_squared();
            if energy == 0.0 {
                return Err(Error::InvalidParameter("NMSE of an all-zero signal".into()));
            }
            Ok((xh - x).norm_squared() / energy)
        })
        .collect()
}

/// NMSE in dB; for several columns the linear ratios are averaged first.
pub fn nmse_db(x_hat: &DMatrix<f64>, x_true: &DMatrix<f64>) -> Result<f64> {
    let ratios = nmse_ratios(x_hat, x_true)?;
    Ok(ratio_to_db(ratios.iter().sum::<f64>() / ratios.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QqData {
    /// `(theoretical_quantile, sample_quantile)`, theoretical increasing.
    pub points: Vec<(f64, f64)>,
    pub excess_kurtosis: f64,
}

impl QqData {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "# excess_kurtosis={}", self.excess_kurtosis)?;
        writeln!(w, "theoretical_quantile,sample_quantile")?;
        for (t, s) in &self.points {
            writeln!(w, "{t},{s}")?;
        }
        Ok(())
    }
}

pub const QQ_MIN_SAMPLES: usize = 100;

/// Standardizes `samples`, pairs their order statistics with standard-normal
/// quantiles at `(i - 0.5)/n`, and computes `m4/m2^2 - 3`.
pub fn qq_data(samples: &[f64]) -> Result<QqData> {
    let n = samples.len();
    if n < QQ_MIN_SAMPLES {
        return Err(Error::InvalidParameter(format!(
            "QQ data needs at least {QQ_MIN_SAMPLES} samples, got {n}"
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("QQ samples"));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let (m2, m4) = samples.iter().fold((0.0, 0.0), |(m2, m4), x| {
        let d2 = (x - mean) * (x - mean);
        (m2 + d2, m4 + d2 * d2)
    });
    let (m2, m4) = (m2 / nf, m4 / nf);
    if m2 <= 0.0 {
        return Err(Error::InvalidParameter("QQ samples have zero variance".into()));
    }
    let std = m2.sqrt();
    let mut z: Vec<f64> = samples.iter().map(|x| (x - mean) / std).collect();
    z.sort_by(f64::total_cmp);
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let points = z
        .into_iter()
        .enumerate()
        .map(|(i, s)| (normal.inverse_cdf((i as f64 + 0.5) / nf), s))
        .collect();
    Ok(QqData {
        points,
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
    })
}

/// LASSO weight paired with the AMP tuning `alpha`. At an AMP fixed point
/// `x = eta(x + A^T v; theta)` with `v (1 - b) = y - A x` and `b = ||x||_0 / M`,
/// so `x` solves the LASSO with `lambda = theta (1 - b)`. Returns that value
/// averaged over iterations 90..100 and all columns of `y`.
pub fn lambda_from_alpha(a: &DMatrix<f64>, y: &DMatrix<f64>, alpha: f64) -> Result<f64> {
    const ITERS: usize = 100;
    const TAIL: usize = 10;
    let config = SolverConfig::amp(alpha, ITERS);
    let m = a.nrows() as f64;
    let mut sum = 0.0;
    let mut count = 0usize;
    let runs = run_solver_observed(&config, a, y, None, |it| {
        if it.t >= ITERS - TAIL && it.t < ITERS {
            for (j, theta) in it.thresholds.iter().enumerate() {
                let b = it.x_hat.column(j).iter().filter(|v| **v != 0.0).count() as f64 / m;
                sum += theta * (1.0 - b).max(0.0);
            }
            count += it.thresholds.len();
        }
    })?;
    let diverged = runs.iter().filter(|r| r.status() == Status::Diverged).count();
    if diverged > 0 {
        return Err(Error::Diverged {
            diverged,
            total: runs.len(),
        });
    }
    Ok(sum / count as f64)
}

/// Least-squares fit `argmin_A sum_d ||y_d - A x_d||^2` via QR of `X^T`.
pub fn estimate_a_least_squares(batch: &SampleBatch) -> Result<DMatrix<f64>> {
    let (n, d) = batch.signals.shape();
    if d < n {
        return Err(Error::RankDeficient("signal matrix: fewer samples than signal dimension"));
    }
    let qr = batch.signals.transpose().qr();
    let r = qr.r();
    let diag_max = r.diagonal().amax();
    if diag_max == 0.0 || r.diagonal().iter().any(|v| v.abs() <= 1e-10 * diag_max) {
        return Err(Error::RankDeficient("signal matrix"));
    }
    let rhs = qr.q().transpose() * batch.measurements.transpose();
    let at = r
        .solve_upper_triangular(&rhs)
        .ok_or(Error::RankDeficient("signal matrix"))?;
    Ok(at.transpose())
}
