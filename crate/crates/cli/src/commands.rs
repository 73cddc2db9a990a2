//! Subcommand implementations. Each returns the process exit code.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sparse_unfold::experiment::{ista_stepsize, network_crossing, solver_crossing, CrossingErrors};
use sparse_unfold::io::write_matrix;
use sparse_unfold::metrics::{average_trajectories, estimate_a_least_squares, lambda_from_alpha, qq_data, Status, Trajectory};
use sparse_unfold::nets::{read_params, write_params, NetworkKind, NetworkParams};
use sparse_unfold::problem::{condition_number, gen_matrix, ProblemInstance, SampleBatch};
use sparse_unfold::rng::child_seed;
use sparse_unfold::solvers::{run_solver, Algorithm, SolverConfig};
use sparse_unfold::train::{evaluate, evaluate_per_layer, train_layerwise_with, write_adam, SyntheticStream};
use sparse_unfold::Error;

use crate::config::ExperimentConfig;
use crate::manifest::Manifest;

pub const EXIT_OK: u8 = 0;
pub const EXIT_TRAINING_DIVERGED: u8 = 2;
pub const EXIT_NO_CROSSING: u8 = 3;

// Child-stream indices under the experiment seed.
const REALIZATIONS: u64 = 1;
const VALIDATION: u64 = 2;
const TEST: u64 = 3;
const TRAINING: u64 = 4;
const ESTIMATION: u64 = 5;
const INJECTION: u64 = 6;

struct Setup {
    instance: ProblemInstance,
    config_toml: String,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let config_toml = cfg.to_toml()?;
    fs::write(cfg.output_dir.join("config.toml"), &config_toml)?;
    Ok(Setup {
        instance: gen_matrix(&cfg.problem)?,
        config_toml,
    })
}

fn realizations(cfg: &ExperimentConfig, inst: &ProblemInstance) -> Result<SampleBatch> {
    Ok(inst.sample(cfg.realizations, child_seed(cfg.seed, REALIZATIONS))?)
}

fn matrix_bytes(m: &DMatrix<f64>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_matrix(&mut buf, m)?;
    Ok(buf)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn generate(cfg: &ExperimentConfig) -> Result<u8> {
    let Setup { instance, config_toml } = setup(cfg)?;
    let batch = realizations(cfg, &instance)?;
    let out = &cfg.output_dir;
    let mut manifest = Manifest::new("generate", cfg.seed, &config_toml);
    manifest.write_file(out, "A.bin", &matrix_bytes(&instance.matrix)?)?;
    manifest.write_file(out, "x.bin", &matrix_bytes(&batch.signals)?)?;
    manifest.write_file(out, "y.bin", &matrix_bytes(&batch.measurements)?)?;
    manifest.fact("noise_variance", batch.noise_variance);
    manifest.fact("condition_number", condition_number(&instance.matrix));
    manifest.fact("spectral_norm_sq", instance.spectral_norm_sq);
    print!("{}", manifest.save(out)?);
    Ok(EXIT_OK)
}

/// Threshold for ISTA/FISTA: explicit, or tuned from the AMP `alpha`.
fn ista_lambda(cfg: &ExperimentConfig, inst: &ProblemInstance, y: &DMatrix<f64>) -> Result<f64> {
    if let Some(l) = cfg.solver.lambda {
        return Ok(l);
    }
    match lambda_from_alpha(&inst.matrix, y, cfg.solver.alpha) {
        Ok(l) => Ok(l),
        Err(Error::Diverged { diverged, total }) => bail!(
            "AMP diverged on {diverged} of {total} realizations while tuning lambda; set solver.lambda explicitly"
        ),
        Err(e) => Err(e.into()),
    }
}

fn solver_config(cfg: &ExperimentConfig, inst: &ProblemInstance, algorithm: Algorithm, lambda: Option<f64>) -> Result<SolverConfig> {
    let iters = cfg.solver.iterations(algorithm);
    let step = cfg.solver.stepsize.unwrap_or_else(|| ista_stepsize(inst));
    let mut config = match algorithm {
        Algorithm::Amp => SolverConfig::amp(cfg.solver.alpha, iters),
        Algorithm::Ista => SolverConfig::ista(step, lambda.expect("lambda resolved"), iters),
        Algorithm::Fista => SolverConfig::fista(step, lambda.expect("lambda resolved"), iters),
    };
    config.clamp_momentum = cfg.solver.clamp_momentum;
    if let Some(warning) = config.validate(inst.spectral_norm_sq)? {
        eprintln!("warning: {}: {warning}", algorithm.name());
    }
    Ok(config)
}

/// Realizations per solver call. Fixed so that floating-point results, whose
/// GEMM accumulation order depends on the batch width, are the same for any
/// thread count.
const CHUNK: usize = 16;

/// Runs `config` on fixed-width column chunks spread over `threads` workers.
fn solve_parallel(config: &SolverConfig, a: &DMatrix<f64>, batch: &SampleBatch, threads: usize) -> Result<Vec<Trajectory>> {
    let d = batch.len();
    let pieces: Vec<SampleBatch> = (0..d).step_by(CHUNK).map(|s| batch.columns(s, CHUNK.min(d - s))).collect();
    let workers = threads.min(pieces.len()).max(1);
    let mut results: Vec<Option<sparse_unfold::Result<Vec<Trajectory>>>> = (0..pieces.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let pieces = &pieces;
                scope.spawn(move || {
                    (w..pieces.len())
                        .step_by(workers)
                        .map(|k| (k, run_solver(config, a, &pieces[k].measurements, Some(&pieces[k].signals))))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (k, r) in h.join().expect("solver thread panicked") {
                results[k] = Some(r);
            }
        }
    });
    let mut runs = Vec::with_capacity(d);
    for r in results {
        runs.extend(r.expect("every chunk ran")?);
    }
    Ok(runs)
}

fn write_runs_csv(path: &Path, runs: &[Trajectory]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "realization,status,iterations,best_nmse_db,final_nmse_db")?;
    for (i, run) in runs.iter().enumerate() {
        let last = run.entries.last();
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{i},{},{},{},{}",
            run.status(),
            last.map(|e| e.t).unwrap_or(0),
            fmt(run.best_nmse_db()),
            fmt(last.and_then(|e| e.nmse_db))
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn solve(cfg: &ExperimentConfig) -> Result<u8> {
    let Setup { instance, config_toml } = setup(cfg)?;
    let batch = realizations(cfg, &instance)?;
    let out = &cfg.output_dir;
    let needs_lambda = cfg.solver.algorithms.iter().any(|a| *a != Algorithm::Amp);
    let lambda = if needs_lambda {
        Some(ista_lambda(cfg, &instance, &batch.measurements)?)
    } else {
        None
    };
    let mut manifest = Manifest::new("solve", cfg.seed, &config_toml);
    if let Some(l) = lambda {
        manifest.fact("lambda", l);
    }
    for &algorithm in &cfg.solver.algorithms {
        let config = solver_config(cfg, &instance, algorithm, lambda)?;
        let runs = solve_parallel(&config, &instance.matrix, &batch, cfg.threads)?;
        let average = average_trajectories(algorithm.name(), &runs);
        let name = algorithm.name();
        let mut buf = Vec::new();
        average.write_csv(&mut buf)?;
        manifest.write_file(out, &format!("{name}.csv"), &buf)?;
        write_runs_csv(&out.join(format!("{name}_runs.csv")), &runs)?;

        let diverged = runs.iter().filter(|r| r.status() == Status::Diverged).count();
        manifest.fact(&format!("{name}_diverged"), diverged as f64);
        let last = average.entries.last().and_then(|e| e.nmse_db);
        let to30 = average.iterations_to(-30.0);
        println!(
            "{name}: final NMSE {} dB after {} iterations; -30 dB reached at {}; diverged {diverged}/{}",
            last.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into()),
            config.max_iters,
            to30.map(|t| t.to_string()).unwrap_or_else(|| "never".into()),
            runs.len()
        );
    }
    manifest.save(out)?;
    Ok(EXIT_OK)
}

/// The matrix the network is built and run with: the true `A`, or a
/// least-squares fit from training pairs.
fn network_matrix(cfg: &ExperimentConfig, inst: &ProblemInstance) -> Result<DMatrix<f64>> {
    if !cfg.network.estimate_matrix {
        return Ok(inst.matrix.clone());
    }
    let d = (2 * inst.n_cols()).max(cfg.network.train_batch);
    let pairs = inst.sample(d, child_seed(cfg.seed, ESTIMATION))?;
    Ok(estimate_a_least_squares(&pairs)?)
}

fn checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.network
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("checkpoint.bin"))
}

fn load_network(cfg: &ExperimentConfig, inst: &ProblemInstance) -> Result<NetworkParams> {
    let path = checkpoint_path(cfg);
    let mut r = BufReader::new(File::open(&path).with_context(|| format!("opening checkpoint {}", path.display()))?);
    let params = read_params(&mut r).with_context(|| format!("reading {}", path.display()))?;
    if params.n() != inst.n_cols() || params.m() != inst.n_rows() {
        bail!(
            "checkpoint is for a {}x{} problem, config describes {}x{}",
            params.m(),
            params.n(),
            inst.n_rows(),
            inst.n_cols()
        );
    }
    Ok(params)
}

pub fn train(cfg: &ExperimentConfig) -> Result<u8> {
    let Setup { instance, config_toml } = setup(cfg)?;
    let out = &cfg.output_dir;
    let a_net = network_matrix(cfg, &instance)?;
    let validation = instance.sample(cfg.network.validation_size, child_seed(cfg.seed, VALIDATION))?;
    let test = instance.sample(cfg.network.test_size, child_seed(cfg.seed, TEST))?;
    let mut stream = SyntheticStream::new(instance.clone(), cfg.network.train_batch, child_seed(cfg.seed, TRAINING));
    let spec = cfg.network.spec();

    let mut curve: Vec<(usize, f64, f64)> = Vec::new();
    let mut eval_error = None;
    let result = train_layerwise_with(&spec, &a_net, &mut stream, &validation, &cfg.schedule, |depth, params| {
        let pair = evaluate(params, &a_net, &validation).and_then(|(_, v)| Ok((v, evaluate(params, &a_net, &test)?.1)));
        match pair {
            Ok((val_db, test_db)) => {
                println!("layer {depth}: validation {val_db:.2} dB, test {test_db:.2} dB");
                curve.push((depth, val_db, test_db));
            }
            Err(e) => {
                eval_error.get_or_insert(e);
            }
        }
    });
    let outcome = match result {
        Ok(o) => o,
        Err(Error::TrainingDiverged { layer, log }) => {
            let mut w = create(&out.join("train_log.csv"))?;
            log.write_csv(&mut w)?;
            w.flush()?;
            eprintln!("error: training diverged in layer {layer}; log kept in train_log.csv");
            return Ok(EXIT_TRAINING_DIVERGED);
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(e) = eval_error {
        return Err(e.into());
    }

    let mut manifest = Manifest::new("train", cfg.seed, &config_toml);
    let mut ckpt = Vec::new();
    write_params(&mut ckpt, &outcome.params)?;
    write_adam(&mut ckpt, &outcome.optimizer)?;
    manifest.write_file(out, "checkpoint.bin", &ckpt)?;

    let mut log = Vec::new();
    outcome.log.write_csv(&mut log)?;
    manifest.write_file(out, "train_log.csv", &log)?;

    let mut dc = String::from("depth,validation_nmse_db,test_nmse_db\n");
    for (d, v, t) in &curve {
        dc.push_str(&format!("{d},{v},{t}\n"));
    }
    manifest.write_file(out, "depth_curve.csv", dc.as_bytes())?;

    let (_, final_db) = evaluate(&outcome.params, &a_net, &validation)?;
    manifest.fact("final_validation_nmse_db", final_db);
    manifest.save(out)?;
    println!("final validation NMSE: {final_db:.2} dB");
    Ok(EXIT_OK)
}

pub fn eval(cfg: &ExperimentConfig) -> Result<u8> {
    let Setup { instance, .. } = setup(cfg)?;
    let params = load_network(cfg, &instance)?;
    let a_net = network_matrix(cfg, &instance)?;
    let test = instance.sample(cfg.network.test_size, child_seed(cfg.seed, TEST))?;
    let per_layer = evaluate_per_layer(&params, &a_net, &test)?;
    let amp = run_solver(&SolverConfig::amp(cfg.solver.alpha, params.depth()), &instance.matrix, &test.measurements, Some(&test.signals))?;
    let amp = average_trajectories("amp", &amp);

    let mut w = create(&cfg.output_dir.join("eval.csv"))?;
    writeln!(w, "layer,network_nmse_db,amp_nmse_db")?;
    println!("layer  network_dB  amp_dB");
    for (i, db) in per_layer.iter().enumerate() {
        let t = i + 1;
        let amp_db = amp.nmse_at(t);
        writeln!(w, "{t},{db},{}", amp_db.map(|v| v.to_string()).unwrap_or_default())?;
        println!(
            "{t:>5}  {db:>10.2}  {}",
            amp_db.map(|v| format!("{v:>6.2}")).unwrap_or_else(|| "   n/a".into())
        );
    }
    w.flush()?;
    Ok(EXIT_OK)
}

fn gaussian_errors(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

pub fn qq(cfg: &ExperimentConfig, inject_gaussian: bool) -> Result<u8> {
    let Setup { instance, .. } = setup(cfg)?;
    let batch = realizations(cfg, &instance)?;
    let level = cfg.qq.level_db;
    let lambda = ista_lambda(cfg, &instance, &batch.measurements)?;

    let amp = SolverConfig::amp(cfg.solver.alpha, cfg.qq.amp_max_iters);
    let ista = SolverConfig::ista(
        cfg.solver.stepsize.unwrap_or_else(|| ista_stepsize(&instance)),
        lambda,
        cfg.qq.ista_max_iters,
    );
    let mut panels: Vec<(&str, Option<CrossingErrors>)> = vec![
        ("amp", solver_crossing(&amp, &instance.matrix, &batch, level)?),
        ("ista", solver_crossing(&ista, &instance.matrix, &batch, level)?),
    ];
    if checkpoint_path(cfg).exists() {
        let params = load_network(cfg, &instance)?;
        if params.kind() == NetworkKind::Lamp {
            let a_net = network_matrix(cfg, &instance)?;
            panels.push(("lamp", network_crossing(&params, &a_net, &batch, level)?));
        } else {
            eprintln!("note: checkpoint is not a LAMP network; skipping that panel");
        }
    } else {
        eprintln!("note: no checkpoint at {}; skipping the LAMP panel", checkpoint_path(cfg).display());
    }

    let inject = inject_gaussian || cfg.qq.inject_gaussian;
    let mut missing = Vec::new();
    for (k, (name, crossing)) in panels.iter().enumerate() {
        let Some(c) = crossing else {
            missing.push(*name);
            continue;
        };
        let errors = if inject {
            gaussian_errors(c.scaled.len(), child_seed(cfg.seed, INJECTION + k as u64))
        } else {
            c.scaled.clone()
        };
        let data = qq_data(&errors)?;
        let mut w = create(&cfg.output_dir.join(format!("qq_{name}.csv")))?;
        data.write_csv(&mut w)?;
        w.flush()?;
        println!(
            "{name}: t={} NMSE {:.2} dB, excess kurtosis {:.4} (raw pool {:.4})",
            c.t,
            c.nmse_db,
            data.excess_kurtosis,
            qq_data(&c.errors)?.excess_kurtosis
        );
    }
    if !missing.is_empty() {
        eprintln!("error: never reached {level} dB: {}", missing.join(", "));
        return Ok(EXIT_NO_CROSSING);
    }
    Ok(EXIT_OK)
}
