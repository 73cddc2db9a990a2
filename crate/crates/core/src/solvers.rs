//! ISTA, FISTA and AMP.
//!
//! All iterations act on a batch: the columns of `y` (M×D) are independent
//! problems sharing the measurement matrix `A` (M×N), and the state holds one
//! estimate per column. A single measurement vector is simply `D = 1`.
//!
//! Divergence is tracked per column: once `||v_t||_2` becomes non-finite or
//! exceeds [`DIVERGENCE_RATIO`]` * ||y||_2`, that column is frozen and marked.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::denoiser::{check_lambda, shrink};
use crate::error::{check_dim, Error, Result};
use crate::metrics::{nmse_ratios, ratio_to_db, Status, Trajectory, TrajectoryEntry};

pub const DIVERGENCE_RATIO: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Ista,
    Fista,
    Amp,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Ista => "ista",
            Algorithm::Fista => "fista",
            Algorithm::Amp => "amp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub algorithm: Algorithm,
    /// ISTA/FISTA step size, ideally in `(0, 1/||A||_2^2]`.
    pub stepsize: f64,
    /// Weight of the l1 term in the LASSO objective; the ISTA/FISTA
    /// soft threshold is `stepsize * lambda`.
    pub lambda: f64,
    /// AMP threshold multiplier.
    pub alpha: f64,
    pub max_iters: usize,
    /// Replace the FISTA momentum `(t-2)/(t+1)` by `max(0, (t-2)/(t+1))`.
    #[serde(default)]
    pub clamp_momentum: bool,
}

impl SolverConfig {
    pub fn ista(stepsize: f64, lambda: f64, max_iters: usize) -> Self {
        Self {
            algorithm: Algorithm::Ista,
            stepsize,
            lambda,
            alpha: 0.0,
            max_iters,
            clamp_momentum: false,
        }
    }

    pub fn fista(stepsize: f64, lambda: f64, max_iters: usize) -> Self {
        Self {
            algorithm: Algorithm::Fista,
            ..Self::ista(stepsize, lambda, max_iters)
        }
    }

    pub fn amp(alpha: f64, max_iters: usize) -> Self {
        Self {
            algorithm: Algorithm::Amp,
            stepsize: 0.0,
            lambda: 0.0,
            alpha,
            max_iters,
            clamp_momentum: false,
        }
    }

    /// Hard parameter errors are returned; a step size above
    /// `1/||A||_2^2` only yields a warning string.
    pub fn validate(&self, spectral_norm_sq: f64) -> Result<Option<String>> {
        match self.algorithm {
            Algorithm::Ista | Algorithm::Fista => {
                check_lambda(self.lambda)?;
                if !(self.stepsize > 0.0 && self.stepsize.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "step size must be positive, got {}",
                        self.stepsize
                    )));
                }
                let limit = 1.0 / spectral_norm_sq;
                Ok((self.stepsize > limit * (1.0 + 1e-12)).then(|| {
                    format!(
                        "step size {} exceeds 1/||A||^2 = {limit}; convergence is not guaranteed",
                        self.stepsize
                    )
                }))
            }
            Algorithm::Amp => {
                if !(self.alpha > 0.0 && self.alpha.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "alpha must be positive, got {}",
                        self.alpha
                    )));
                }
                Ok(None)
            }
        }
    }
}

/// Iteration state for a batch of `D` problems.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    /// Current estimates `x_t` (N×D).
    pub x_hat: DMatrix<f64>,
    /// Previous estimates `x_{t-1}` (N×D); equals `x_hat` at `t = 0`.
    pub x_prev: DMatrix<f64>,
    /// Residual computed by the previous step, `v_{t-1}` (M×D); zero at `t = 0`.
    pub v: DMatrix<f64>,
    pub t: usize,
    /// Per-column threshold used by the previous step.
    pub thresholds: Vec<f64>,
    /// Per-column iteration at which divergence was detected.
    pub diverged_at: Vec<Option<usize>>,
}

impl SolverState {
    /// `x_0 = 0`, `v_{-1} = 0`.
    pub fn zeros(n: usize, m: usize, d: usize) -> Self {
        Self {
            x_hat: DMatrix::zeros(n, d),
            x_prev: DMatrix::zeros(n, d),
            v: DMatrix::zeros(m, d),
            t: 0,
            thresholds: vec![0.0; d],
            diverged_at: vec![None; d],
        }
    }

    pub fn columns(&self) -> usize {
        self.x_hat.ncols()
    }

    pub fn status(&self, column: usize) -> Status {
        match self.diverged_at[column] {
            Some(_) => Status::Diverged,
            None => Status::Ok,
        }
    }

    fn active(&self, column: usize) -> bool {
        self.diverged_at[column].is_none()
    }
}

/// What one step computed on the way to the next state.
struct Advance {
    next: SolverState,
    /// `v_t`.
    residual: DMatrix<f64>,
    /// Denoiser input `r_t`.
    denoiser_input: DMatrix<f64>,
    /// Columns that diverged at this step.
    newly_diverged: Vec<usize>,
}

#[derive(Clone, Copy)]
enum Rule {
    Ista { beta: f64, lambda: f64 },
    Fista { beta: f64, lambda: f64, clamp: bool },
    Amp { alpha: f64 },
}

fn check_shapes(state: &SolverState, a: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    check_dim("y rows", a.nrows(), y.nrows())?;
    check_dim("estimate rows", a.ncols(), state.x_hat.nrows())?;
    check_dim("state columns", y.ncols(), state.x_hat.ncols())?;
    check_dim("residual rows", a.nrows(), state.v.nrows())?;
    Ok(())
}

fn advance(state: &SolverState, a: &DMatrix<f64>, y: &DMatrix<f64>, rule: Rule) -> Result<Advance> {
    check_shapes(state, a, y)?;
    let (m, d) = y.shape();
    let t = state.t;

    // v_t = y - A x_t (+ b_t v_{t-1} for AMP)
    let mut v = y - a * &state.x_hat;
    if let Rule::Amp { .. } = rule {
        for j in 0..d {
            let nnz = state.x_hat.column(j).iter().filter(|x| **x != 0.0).count();
            let onsager = nnz as f64 / m as f64;
            if onsager != 0.0 {
                let prev = state.v.column(j).clone_owned();
                v.column_mut(j).axpy(onsager, &prev, 1.0);
            }
        }
    }

    let mut newly_diverged = Vec::new();
    let mut thresholds = vec![0.0; d];
    for j in 0..d {
        let v_norm = v.column(j).norm();
        if state.active(j)
            && (!v_norm.is_finite() || v_norm > DIVERGENCE_RATIO * y.column(j).norm())
        {
            newly_diverged.push(j);
        }
        thresholds[j] = match rule {
            Rule::Ista { beta, lambda } | Rule::Fista { beta, lambda, .. } => beta * lambda,
            Rule::Amp { alpha } => alpha * v_norm / (m as f64).sqrt(),
        };
    }

    let mut r = match rule {
        Rule::Ista { beta, .. } => &state.x_hat + (a.tr_mul(&v) * beta),
        Rule::Fista { beta, clamp, .. } => {
            let mut c = (t as f64 - 2.0) / (t as f64 + 1.0);
            if clamp {
                c = c.max(0.0);
            }
            &state.x_hat + a.tr_mul(&v) * beta + (&state.x_hat - &state.x_prev) * c
        }
        Rule::Amp { .. } => &state.x_hat + a.tr_mul(&v),
    };
    let denoiser_input = r.clone();
    for (j, mut col) in r.column_iter_mut().enumerate() {
        let lambda = thresholds[j];
        col.iter_mut().for_each(|x| *x = shrink(*x, lambda));
    }

    let mut next = SolverState {
        x_prev: state.x_hat.clone(),
        x_hat: r,
        v: v.clone(),
        t: t + 1,
        thresholds,
        diverged_at: state.diverged_at.clone(),
    };
    for &j in &newly_diverged {
        next.diverged_at[j] = Some(t);
    }
    // Frozen columns keep their last healthy state.
    for j in 0..d {
        if !next.active(j) {
            next.x_hat.set_column(j, &state.x_hat.column(j));
            next.x_prev.set_column(j, &state.x_prev.column(j));
            next.v.set_column(j, &state.v.column(j));
            next.thresholds[j] = state.thresholds[j];
        }
    }
    Ok(Advance {
        next,
        residual: v,
        denoiser_input,
        newly_diverged,
    })
}

/// `v_t = y - A x_t`, `x_{t+1} = eta(x_t + beta A^T v_t; beta lambda)`.
pub fn ista_step(
    state: &SolverState,
    a: &DMatrix<f64>,
    y: &DMatrix<f64>,
    beta: f64,
    lambda: f64,
) -> Result<SolverState> {
    check_lambda(lambda)?;
    Ok(advance(state, a, y, Rule::Ista { beta, lambda })?.next)
}

/// ISTA plus the momentum term `(t-2)/(t+1) (x_t - x_{t-1})`.
pub fn fista_step(
    state: &SolverState,
    a: &DMatrix<f64>,
    y: &DMatrix<f64>,
    beta: f64,
    lambda: f64,
    clamp_momentum: bool,
) -> Result<SolverState> {
    check_lambda(lambda)?;
    let rule = Rule::Fista {
        beta,
        lambda,
        clamp: clamp_momentum,
    };
    Ok(advance(state, a, y, rule)?.next)
}

/// `v_t = y - A x_t + (||x_t||_0 / M) v_{t-1}`,
/// `x_{t+1} = eta(x_t + A^T v_t; alpha ||v_t||_2 / sqrt(M))`.
pub fn amp_step(state: &SolverState, a: &DMatrix<f64>, y: &DMatrix<f64>, alpha: f64) -> Result<SolverState> {
    Ok(advance(state, a, y, Rule::Amp { alpha })?.next)
}

/// What an observer sees at iteration `t`.
pub struct Iterate<'a> {
    pub t: usize,
    /// `x_t`.
    pub x_hat: &'a DMatrix<f64>,
    /// `v_t`.
    pub residual: &'a DMatrix<f64>,
    /// `r_t`, the input to the denoiser producing `x_{t+1}`.
    pub denoiser_input: &'a DMatrix<f64>,
    /// Threshold applied to `r_t`, per column.
    pub thresholds: &'a [f64],
    /// Whether each column is still running at `t`.
    pub active: &'a [bool],
}

pub fn run_solver(
    config: &SolverConfig,
    a: &DMatrix<f64>,
    y: &DMatrix<f64>,
    x_true: Option<&DMatrix<f64>>,
) -> Result<Vec<Trajectory>> {
    run_solver_observed(config, a, y, x_true, |_| {})
}

/// Runs `max_iters` iterations and returns one trajectory per column of `y`.
///
/// Entry `t` holds `NMSE(x_t)` and `||v_t||_2`; a column that diverges gets a
/// final `Diverged` entry and no further ones. The run stops early when all
/// columns have diverged.
pub fn run_solver_observed(
    config: &SolverConfig,
    a: &DMatrix<f64>,
    y: &DMatrix<f64>,
    x_true: Option<&DMatrix<f64>>,
    mut observe: impl FnMut(&Iterate<'_>),
) -> Result<Vec<Trajectory>> {
    let (m, n) = a.shape();
    let d = y.ncols();
    if let Some(x) = x_true {
        check_dim("ground-truth rows", n, x.nrows())?;
        check_dim("ground-truth columns", d, x.ncols())?;
    }
    let rule = match config.algorithm {
        Algorithm::Ista | Algorithm::Fista => {
            config.validate(f64::INFINITY)?;
            if config.algorithm == Algorithm::Ista {
                Rule::Ista {
                    beta: config.stepsize,
                    lambda: config.lambda,
                }
            } else {
                Rule::Fista {
                    beta: config.stepsize,
                    lambda: config.lambda,
                    clamp: config.clamp_momentum,
                }
            }
        }
        Algorithm::Amp => {
            config.validate(f64::INFINITY)?;
            Rule::Amp { alpha: config.alpha }
        }
    };

    let mut runs: Vec<Trajectory> = (0..d).map(|_| Trajectory::new(config.algorithm.name())).collect();
    let mut state = SolverState::zeros(n, m, d);
    loop {
        let t = state.t;
        let adv = advance(&state, a, y, rule)?;
        let ratios = match x_true {
            Some(x) => Some(nmse_ratios(&state.x_hat, x)?),
            None => None,
        };
        let active: Vec<bool> = (0..d).map(|j| state.active(j)).collect();
        observe(&Iterate {
            t,
            x_hat: &state.x_hat,
            residual: &adv.residual,
            denoiser_input: &adv.denoiser_input,
            thresholds: &adv.next.thresholds,
            active: &active,
        });
        for (j, run) in runs.iter_mut().enumerate() {
            if !active[j] {
                continue;
            }
            let status = if adv.newly_diverged.contains(&j) {
                Status::Diverged
            } else {
                Status::Ok
            };
            run.push(TrajectoryEntry {
                t,
                nmse_db: ratios.as_ref().map(|r| ratio_to_db(r[j])),
                v_norm: adv.residual.column(j).norm(),
                status,
            });
        }
        if t >= config.max_iters || adv.next.diverged_at.iter().all(Option::is_some) {
            break;
        }
        state = adv.next;
    }
    Ok(runs)
}

/// `1/2 ||y - A x||^2 + lambda ||x||_1` per column.
pub fn lasso_objective(a: &DMatrix<f64>, y: &DMatrix<f64>, x: &DMatrix<f64>, lambda: f64) -> Vec<f64> {
    let resid = y - a * x;
    resid
        .column_iter()
        .zip(x.column_iter())
        .map(|(r, xc)| 0.5 * r.norm_squared() + lambda * xc.lp_norm(1))
        .collect()
}
