//! Experiment configuration file (TOML). Every key is optional; missing keys
//! take the defaults below. Command-line flags override file values.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sparse_unfold::nets::{ListaForm, NetworkKind, Tying, INITIAL_ALPHA};
use sparse_unfold::problem::ProblemConfig;
use sparse_unfold::solvers::Algorithm;
use sparse_unfold::train::{NetworkSpec, TrainSchedule};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Experiment seed. Realization, validation, test and training streams
    /// are derived from it.
    pub seed: u64,
    pub realizations: usize,
    pub output_dir: PathBuf,
    pub threads: usize,
    pub problem: ProblemConfig,
    pub solver: SolverSection,
    pub network: NetworkSection,
    pub schedule: TrainSchedule,
    pub qq: QqSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 1,
            realizations: 200,
            output_dir: PathBuf::from("out"),
            threads: 1,
            problem: ProblemConfig::default(),
            solver: SolverSection::default(),
            network: NetworkSection::default(),
            schedule: TrainSchedule::default(),
            qq: QqSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub algorithms: Vec<Algorithm>,
    /// AMP threshold multiplier; also sets the ISTA/FISTA threshold when
    /// `lambda` is absent.
    pub alpha: f64,
    pub max_iters: usize,
    pub fista_max_iters: Option<usize>,
    pub ista_max_iters: Option<usize>,
    pub lambda: Option<f64>,
    /// Defaults to `1 / ||A||_2^2`.
    pub stepsize: Option<f64>,
    pub clamp_momentum: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            algorithms: vec![Algorithm::Amp, Algorithm::Fista, Algorithm::Ista],
            alpha: INITIAL_ALPHA,
            max_iters: 100,
            fista_max_iters: None,
            ista_max_iters: None,
            lambda: None,
            stepsize: None,
            clamp_momentum: false,
        }
    }
}

impl SolverSection {
    pub fn iterations(&self, algorithm: Algorithm) -> usize {
        match algorithm {
            Algorithm::Amp => self.max_iters,
            Algorithm::Fista => self.fista_max_iters.unwrap_or(self.max_iters),
            Algorithm::Ista => self.ista_max_iters.unwrap_or(self.max_iters),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub kind: NetworkKind,
    pub tying: Tying,
    pub lista_form: ListaForm,
    pub structured: bool,
    /// Fresh training batch size per optimizer step.
    pub train_batch: usize,
    pub validation_size: usize,
    pub test_size: usize,
    /// Fit `A` by least squares on training pairs instead of using the true one.
    pub estimate_matrix: bool,
    /// Checkpoint read by `eval` and `qq`; defaults to `<out>/checkpoint.bin`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            kind: NetworkKind::Lamp,
            tying: Tying::Tied,
            lista_form: ListaForm::Dense,
            structured: false,
            train_batch: 1000,
            validation_size: 1000,
            test_size: 1000,
            estimate_matrix: false,
            checkpoint: None,
        }
    }
}

impl NetworkSection {
    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            kind: self.kind,
            tying: self.tying,
            lista_form: self.lista_form,
            structured: self.structured,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QqSection {
    pub level_db: f64,
    pub amp_max_iters: usize,
    pub ista_max_iters: usize,
    /// Test hook: replace every panel's errors by standard-normal draws.
    pub inject_gaussian: bool,
}

impl Default for QqSection {
    fn default() -> Self {
        Self {
            level_db: -15.0,
            amp_max_iters: 100,
            ista_max_iters: 5000,
            inject_gaussian: false,
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub realizations: Option<usize>,
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<ExperimentConfig>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        // --seed drives both the experiment streams and the matrix draw.
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
            cfg.problem.seed = seed;
        }
        if let Some(out) = &overrides.out {
            cfg.output_dir = out.clone();
        }
        if let Some(r) = overrides.realizations {
            cfg.realizations = r;
        }
        if let Some(t) = overrides.threads {
            cfg.threads = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            bail!("unsupported config version {} (expected {CONFIG_VERSION})", self.version);
        }
        if self.realizations == 0 {
            bail!("realizations must be >= 1");
        }
        if self.threads == 0 {
            bail!("threads must be >= 1");
        }
        if self.network.train_batch == 0 || self.network.validation_size == 0 || self.network.test_size == 0 {
            bail!("network batch sizes must be >= 1");
        }
        if self.solver.algorithms.is_empty() {
            bail!("solver.algorithms is empty");
        }
        self.problem.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
