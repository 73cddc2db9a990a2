//! Experiment-level helpers shared by the command-line runner and the
//! acceptance suite.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::metrics::{average_trajectories, nmse_db, nmse_ratios, Status, Trajectory};
use crate::nets::{forward, NetworkParams};
use crate::problem::{ProblemInstance, SampleBatch};
use crate::solvers::{run_solver_observed, SolverConfig};
use crate::train::{train_layerwise_with, AdamState, NetworkSpec, SyntheticStream, TrainLog, TrainSchedule};

/// ISTA/FISTA step size `1 / ||A||_2^2`.
pub fn ista_stepsize(instance: &ProblemInstance) -> f64 {
    1.0 / instance.spectral_norm_sq
}

/// Per-realization trajectories and their average.
#[derive(Debug, Clone)]
pub struct SolverRun {
    pub average: Trajectory,
    pub runs: Vec<Trajectory>,
}

impl SolverRun {
    pub fn diverged_fraction(&self) -> f64 {
        let n = self.runs.iter().filter(|r| r.status() == Status::Diverged).count();
        n as f64 / self.runs.len().max(1) as f64
    }

    /// Lowest NMSE each realization ever reached, averaged on the linear scale.
    pub fn best_ever_db(&self) -> Option<f64> {
        let mut sum = 0.0;
        for run in &self.runs {
            sum += 10f64.powf(run.best_nmse_db()? / 10.0);
        }
        Some(10.0 * (sum / self.runs.len() as f64).log10())
    }
}

pub fn solve_batch(config: &SolverConfig, a: &DMatrix<f64>, batch: &SampleBatch) -> Result<SolverRun> {
    let runs = run_solver_observed(config, a, &batch.measurements, Some(&batch.signals), |_| {})?;
    Ok(SolverRun {
        average: average_trajectories(config.algorithm.name(), &runs),
        runs,
    })
}

/// Denoiser-input error `r_t - x` pooled over the batch, at the first `t`
/// whose batch NMSE of `x_t` drops below `level_db`.
#[derive(Debug, Clone)]
pub struct CrossingErrors {
    pub t: usize,
    pub nmse_db: f64,
    /// Raw errors, column after column.
    pub errors: Vec<f64>,
    /// The same errors with each column divided by its `||v_t|| / sqrt(M)`.
    /// Realizations converge at different rates, so the raw pool mixes
    /// Gaussians of different widths; this one does not.
    pub scaled: Vec<f64>,
}

/// `||v|| / sqrt(M)` per column of a residual.
fn sigmas(v: &DMatrix<f64>) -> Vec<f64> {
    let m = v.nrows().max(1) as f64;
    v.column_iter().map(|c| c.norm() / m.sqrt()).collect()
}

fn pooled_error(r: &DMatrix<f64>, x: &DMatrix<f64>, columns: &[bool], sigmas: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
    let mut raw = Vec::with_capacity(r.len());
    let mut scaled = Vec::with_capacity(r.len());
    for (j, keep) in columns.iter().enumerate() {
        if !*keep {
            continue;
        }
        let sigma = sigmas.map_or(1.0, |s| s[j]);
        let sigma = if sigma > 0.0 && sigma.is_finite() { sigma } else { 1.0 };
        for (a, b) in r.column(j).iter().zip(x.column(j).iter()) {
            raw.push(a - b);
            scaled.push((a - b) / sigma);
        }
    }
    (raw, scaled)
}

/// Runs `config` and captures the crossing; `None` if the average NMSE never
/// goes below `level_db` within `config.max_iters`. Diverged columns are
/// excluded from both the average and the pooled errors.
pub fn solver_crossing(
    config: &SolverConfig,
    a: &DMatrix<f64>,
    batch: &SampleBatch,
    level_db: f64,
) -> Result<Option<CrossingErrors>> {
    let x = &batch.signals;
    let mut found: Option<CrossingErrors> = None;
    let mut failure: Option<Error> = None;
    run_solver_observed(config, a, &batch.measurements, None, |it| {
        if found.is_some() || failure.is_some() {
            return;
        }
        let ratios = match nmse_ratios(it.x_hat, x) {
            Ok(r) => r,
            Err(e) => {
                failure = Some(e);
                return;
            }
        };
        let live: Vec<f64> = ratios.iter().zip(it.active).filter(|(_, a)| **a).map(|(r, _)| *r).collect();
        if live.is_empty() {
            return;
        }
        let db = 10.0 * (live.iter().sum::<f64>() / live.len() as f64).log10();
        if db < level_db {
            let (errors, scaled) = pooled_error(it.denoiser_input, x, it.active, Some(&sigmas(it.residual)));
            found = Some(CrossingErrors {
                t: it.t,
                nmse_db: db,
                errors,
                scaled,
            });
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(found),
    }
}

/// As [`solver_crossing`] for a network: `t` ranges over layers whose input
/// estimate `x_t` crosses, and the error is that layer's denoiser input.
pub fn network_crossing(
    params: &NetworkParams,
    a: &DMatrix<f64>,
    batch: &SampleBatch,
    level_db: f64,
) -> Result<Option<CrossingErrors>> {
    let tape = forward(params, a, &batch.measurements)?;
    let all = vec![true; batch.len()];
    for (t, rec) in tape.layers.iter().enumerate() {
        let db = nmse_db(&rec.x_in, &batch.signals)?;
        if db < level_db {
            let s = rec.v_in.as_ref().map(sigmas);
            let (errors, scaled) = pooled_error(&rec.r, &batch.signals, &all, s.as_deref());
            return Ok(Some(CrossingErrors {
                t,
                nmse_db: db,
                errors,
                scaled,
            }));
        }
    }
    Ok(None)
}

/// A trained network with its test NMSE after each layer.
#[derive(Debug, Clone)]
pub struct DepthCurve {
    pub params: NetworkParams,
    /// Test NMSE (dB) of the depth-`t` network, `t = 1..=T`.
    pub test_db: Vec<f64>,
    pub log: TrainLog,
    pub optimizer: AdamState,
}

impl DepthCurve {
    /// Smallest depth whose test NMSE is at or below `level_db`.
    pub fn depth_to(&self, level_db: f64) -> Option<usize> {
        self.test_db.iter().position(|db| *db <= level_db).map(|i| i + 1)
    }
}

/// Trains `spec` layer by layer on fresh batches from `stream_seed`, evaluating
/// every intermediate depth on `test`.
pub fn train_depth_curve(
    spec: &NetworkSpec,
    instance: &ProblemInstance,
    validation: &SampleBatch,
    test: &SampleBatch,
    schedule: &TrainSchedule,
    batch_size: usize,
    stream_seed: u64,
    mut progress: impl FnMut(usize, f64),
) -> Result<DepthCurve> {
    let mut stream = SyntheticStream::new(instance.clone(), batch_size, stream_seed);
    let mut test_db = Vec::with_capacity(schedule.target_depth);
    let mut failure = None;
    let out = train_layerwise_with(spec, &instance.matrix, &mut stream, validation, schedule, |depth, p| {
        let tape = match forward(p, &instance.matrix, &test.measurements) {
            Ok(t) => t,
            Err(e) => {
                failure.get_or_insert(e);
                return;
            }
        };
        match nmse_db(&tape.x_out, &test.signals) {
            Ok(db) => {
                test_db.push(db);
                progress(depth, db);
            }
            Err(e) => {
                failure.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(DepthCurve {
        params: out.params,
        test_db,
        log: out.log,
        optimizer: out.optimizer,
    })
}
