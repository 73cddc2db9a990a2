//! Backpropagation, Adam, and layer-wise training of unfolded networks.

use std::collections::HashSet;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::io::{read_f64, read_u64};
use crate::metrics::nmse_db;
use crate::nets::{
    forward, initial_matrices, ForwardTape, LayerMatrices, ListaForm, NetworkKind, NetworkParams, ParamId,
    Tying, INITIAL_ALPHA,
};
use crate::problem::{ProblemInstance, SampleBatch};
use crate::rng::child_seed;

/// Starting `(alpha, beta)` for the first LAMP layer.
pub fn initial_scalars() -> (f64, f64) {
    (INITIAL_ALPHA, 1.0)
}

/// Which tensors receive gradients and updates.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Trainable {
    #[default]
    All,
    Only(HashSet<ParamId>),
}

impl Trainable {
    pub fn only(ids: impl IntoIterator<Item = ParamId>) -> Self {
        Trainable::Only(ids.into_iter().collect())
    }

    pub fn contains(&self, id: ParamId) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Only(set) => set.contains(&id),
        }
    }
}

/// Gradients aligned with [`NetworkParams::param_ids`]. Frozen tensors carry
/// zeros and are skipped by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub ids: Vec<ParamId>,
    pub values: Vec<Vec<f64>>,
    pub frozen: Vec<bool>,
}

impl GradientSet {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.ids.iter().position(|i| *i == id).map(|k| self.values[k].as_slice())
    }

    pub fn is_frozen(&self, id: ParamId) -> Option<bool> {
        self.ids.iter().position(|i| *i == id).map(|k| self.frozen[k])
    }
}

/// `(1/D) sum_d ||x_T,d - x_d||^2`.
pub fn loss(tape: &ForwardTape, x_true: &DMatrix<f64>) -> Result<f64> {
    check_dim("x rows", tape.x_out.nrows(), x_true.nrows())?;
    check_dim("x cols", tape.x_out.ncols(), x_true.ncols())?;
    Ok((&tape.x_out - x_true).norm_squared() / x_true.ncols() as f64)
}

// Accumulators for matrix gradients, one per slot.
struct MatGrads {
    slots: Vec<[Option<DMatrix<f64>>; 2]>,
}

impl MatGrads {
    fn add(&mut self, slot: usize, which: usize, g: DMatrix<f64>) {
        match &mut self.slots[slot][which] {
            Some(acc) => *acc += g,
            cell @ None => *cell = Some(g),
        }
    }
}

/// Loss on `batch` and its gradient with respect to every trainable tensor.
///
/// The `||x||_0` count in the LAMP Onsager term is piecewise constant and
/// contributes no gradient. A column whose residual is exactly zero while its
/// threshold still influences the loss has no derivative and is reported as
/// [`Error::DegenerateBatch`].
pub fn loss_and_gradients(
    params: &NetworkParams,
    a: &DMatrix<f64>,
    batch: &SampleBatch,
    trainable: &Trainable,
) -> Result<(f64, GradientSet)> {
    let tape = forward(params, a, &batch.measurements)?;
    let value = loss(&tape, &batch.signals)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let ids = params.param_ids();
    let frozen: Vec<bool> = ids.iter().map(|id| !trainable.contains(*id)).collect();
    let wants = |id: ParamId| trainable.contains(id);

    let depth = params.depth();
    let d = batch.len() as f64;
    let mut mats = MatGrads {
        slots: (0..params.slots().len()).map(|_| [None, None]).collect(),
    };
    let mut scalars_a = vec![0.0; depth]; // lambda (LISTA) or alpha (LAMP)
    let mut scalars_b = vec![0.0; depth]; // beta (LAMP)

    // Layers before the earliest trainable tensor need no backward pass.
    let first = ids
        .iter()
        .filter(|id| trainable.contains(**id))
        .map(|id| match *id {
            ParamId::Lambda(t) | ParamId::Alpha(t) | ParamId::Beta(t) => t,
            ParamId::B(s) | ParamId::S(s) | ParamId::A(s) | ParamId::C(s) => s,
        })
        .min()
        .unwrap_or(depth);
    let mut gx = (&tape.x_out - &batch.signals) * (2.0 / d);
    match params.kind() {
        NetworkKind::Lamp => {
            backward_lamp(params, a, &tape, first, &mut gx, &wants, &mut mats, &mut scalars_a, &mut scalars_b)?
        }
        NetworkKind::Lista => {
            backward_lista(params, &batch.measurements, &tape, first, &mut gx, &wants, &mut mats, &mut scalars_a)?
        }
    }

    let mut values = Vec::with_capacity(ids.len());
    for (id, fz) in ids.iter().zip(&frozen) {
        let v = match *id {
            ParamId::Lambda(t) | ParamId::Alpha(t) => vec![scalars_a[t]],
            ParamId::Beta(t) => vec![scalars_b[t]],
            ParamId::B(s) | ParamId::S(s) | ParamId::A(s) | ParamId::C(s) => {
                let which = matrix_index(&params.slots()[s], *id);
                let len = params.param(*id).expect("listed id").len();
                match (fz, mats.slots[s][which].take()) {
                    (false, Some(g)) => g.as_slice().to_vec(),
                    _ => vec![0.0; len],
                }
            }
        };
        values.push(v);
    }
    Ok((value, GradientSet { ids, values, frozen }))
}

// Position of `id` within its slot's accumulator pair.
fn matrix_index(slot: &LayerMatrices, id: ParamId) -> usize {
    match (slot, id) {
        (LayerMatrices::ListaDense { .. }, ParamId::S(_)) | (LayerMatrices::ListaFactored { .. }, ParamId::B(_)) => 1,
        _ => 0,
    }
}

// Gradient of the loss w.r.t. the denoiser input, given the gradient `gu`
// w.r.t. its output: masks clipped entries. Also returns `d loss / d lambda`
// per column.
fn through_threshold(gu: &DMatrix<f64>, eta: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let mut gr = gu.clone();
    let mut glam = Vec::with_capacity(eta.ncols());
    for (mut gcol, ecol) in gr.column_iter_mut().zip(eta.column_iter()) {
        let mut s = 0.0;
        for (g, e) in gcol.iter_mut().zip(ecol.iter()) {
            if *e == 0.0 {
                *g = 0.0;
            } else {
                s -= *g * e.signum();
            }
        }
        glam.push(s);
    }
    (gr, glam)
}

#[allow(clippy::too_many_arguments)]
fn backward_lamp(
    params: &NetworkParams,
    a: &DMatrix<f64>,
    tape: &ForwardTape,
    first: usize,
    gx: &mut DMatrix<f64>,
    wants: &dyn Fn(ParamId) -> bool,
    mats: &mut MatGrads,
    g_alpha: &mut [f64],
    g_beta: &mut [f64],
) -> Result<()> {
    let m = params.m() as f64;
    let sqrt_m = m.sqrt();
    // Gradient w.r.t. v_{t+1}; None means zero.
    let mut gv: Option<DMatrix<f64>> = None;
    for t in (first..params.depth()).rev() {
        let rec = &tape.layers[t];
        let v_t = rec.v_in.as_ref().expect("LAMP records v");
        let (alpha, beta) = (params.alpha(t), params.beta(t));
        let slot = params.slot_of(t);
        let mut gv_t = DMatrix::<f64>::zeros(v_t.nrows(), v_t.ncols());
        if let Some(gvn) = gv.take() {
            // v_{t+1} = y - A x_{t+1} + (beta k / M) v_t
            *gx -= a.tr_mul(&gvn);
            for j in 0..gvn.ncols() {
                let k = rec.counts[j] as f64;
                let inner = gvn.column(j).dot(&v_t.column(j));
                g_beta[t] += k / m * inner;
                gv_t.column_mut(j).axpy(rec.onsager[j], &gvn.column(j), 0.0);
            }
        }
        // x_{t+1} = beta * eta
        g_beta[t] += gx.dot(&rec.eta);
        let gu = &*gx * beta;
        let (gr, glam) = through_threshold(&gu, &rec.eta);
        for (j, gl) in glam.iter().enumerate() {
            if *gl == 0.0 {
                continue;
            }
            let nv = rec.v_norms[j];
            if nv == 0.0 {
                return Err(Error::DegenerateBatch { layer: t, column: j });
            }
            g_alpha[t] += gl * nv / sqrt_m;
            gv_t.column_mut(j).axpy(gl * alpha / (sqrt_m * nv), &v_t.column(j), 1.0);
        }
        // r = x_t + B v_t
        match params.layer_matrices(t) {
            LayerMatrices::LampDense { b } => {
                if wants(ParamId::B(slot)) {
                    mats.add(slot, 0, &gr * v_t.transpose());
                }
                if t > first {
                    gv_t += b.tr_mul(&gr);
                }
            }
            LayerMatrices::LampStructured { c } => {
                let w = a * &gr;
                if wants(ParamId::C(slot)) {
                    mats.add(slot, 0, &w * v_t.transpose());
                }
                if t > first {
                    gv_t += c.tr_mul(&w);
                }
            }
            _ => unreachable!("validated LAMP network"),
        }
        *gx = gr;
        gv = Some(gv_t);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn backward_lista(
    params: &NetworkParams,
    y: &DMatrix<f64>,
    tape: &ForwardTape,
    first: usize,
    gx: &mut DMatrix<f64>,
    wants: &dyn Fn(ParamId) -> bool,
    mats: &mut MatGrads,
    g_lambda: &mut [f64],
) -> Result<()> {
    let mut gv: Option<DMatrix<f64>> = None;
    // Dense layers: sum of gr per slot, multiplied by y^T at the end.
    let mut gr_sums: Vec<Option<DMatrix<f64>>> = vec![None; params.slots().len()];
    for t in (first..params.depth()).rev() {
        let rec = &tape.layers[t];
        let slot = params.slot_of(t);
        match params.layer_matrices(t) {
            LayerMatrices::ListaDense { s, .. } => {
                let (gr, glam) = through_threshold(gx, &rec.eta);
                g_lambda[t] += glam.iter().sum::<f64>();
                if wants(ParamId::B(slot)) {
                    match &mut gr_sums[slot] {
                        Some(acc) => *acc += &gr,
                        cell @ None => *cell = Some(gr.clone()),
                    }
                }
                if t > first {
                    if wants(ParamId::S(slot)) {
                        mats.add(slot, 1, &gr * rec.x_in.transpose());
                    }
                    *gx = s.tr_mul(&gr);
                }
            }
            LayerMatrices::ListaFactored { a: a_t, b } => {
                if let Some(gvn) = gv.take() {
                    // v_{t+1} = y - A_t x_{t+1}; A_t is this layer's matrix.
                    *gx -= a_t.tr_mul(&gvn);
                    if wants(ParamId::A(slot)) {
                        mats.add(slot, 0, -(&gvn * rec.eta.transpose()));
                    }
                }
                let (gr, glam) = through_threshold(gx, &rec.eta);
                g_lambda[t] += glam.iter().sum::<f64>();
                let v_t = rec.v_in.as_ref().expect("factored LISTA records v");
                if wants(ParamId::B(slot)) {
                    mats.add(slot, 1, &gr * v_t.transpose());
                }
                if t > first {
                    gv = Some(b.tr_mul(&gr));
                }
                *gx = gr;
            }
            _ => unreachable!("validated LISTA network"),
        }
    }
    for (slot, acc) in gr_sums.into_iter().enumerate() {
        if let Some(g) = acc {
            mats.add(slot, 0, g * y.transpose());
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates, one buffer per tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub ids: Vec<ParamId>,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &NetworkParams, config: AdamConfig) -> Self {
        let ids = params.param_ids();
        let sizes: Vec<usize> = ids.iter().map(|id| params.param(*id).expect("listed id").len()).collect();
        Self::with_sizes(ids, &sizes, config)
    }

    pub fn with_sizes(ids: Vec<ParamId>, sizes: &[usize], config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            ids,
            first: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            second: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    /// Applies one bias-corrected Adam update to tensor `k`.
    /// The caller must advance `step` once per optimizer step beforehand.
    pub fn update_tensor(&mut self, k: usize, theta: &mut [f64], grad: &[f64]) {
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (m, v) = (&mut self.first[k], &mut self.second[k]);
        for i in 0..theta.len() {
            let g = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            theta[i] -= learning_rate * mhat / (vhat.sqrt() + epsilon);
        }
    }
}

pub fn adam_step(params: &mut NetworkParams, grads: &GradientSet, state: &mut AdamState) -> Result<()> {
    if grads.ids != state.ids {
        return Err(Error::InvalidParameter("optimizer state does not match the gradients".into()));
    }
    state.step += 1;
    for (k, id) in grads.ids.iter().enumerate() {
        if grads.frozen[k] {
            continue;
        }
        let theta = params
            .param_mut(*id)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown parameter {id:?}")))?;
        check_dim("gradient length", theta.len(), grads.values[k].len())?;
        state.update_tensor(k, theta, &grads.values[k]);
    }
    Ok(())
}

/// Appends the optimizer section: step, learning rate, tensor count, then
/// per tensor its length followed by the first and second moments (f64 LE).
pub fn write_adam<W: Write>(w: &mut W, state: &AdamState) -> Result<()> {
    w.write_all(b"ADAM")?;
    w.write_all(&state.step.to_le_bytes())?;
    for v in [state.config.learning_rate, state.config.beta1, state.config.beta2, state.config.epsilon] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(state.first.len() as u64).to_le_bytes())?;
    for (m, v) in state.first.iter().zip(&state.second) {
        w.write_all(&(m.len() as u64).to_le_bytes())?;
        for x in m.iter().chain(v) {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a section written by [`write_adam`] for the tensors of `params`.
pub fn read_adam<R: Read>(r: &mut R, params: &NetworkParams) -> Result<AdamState> {
    let mut tag = [0u8; 4];
    r.read_exact(&mut tag)?;
    if &tag != b"ADAM" {
        return Err(Error::Format("missing optimizer section".into()));
    }
    let step = read_u64(r)?;
    let config = AdamConfig {
        learning_rate: read_f64(r)?,
        beta1: read_f64(r)?,
        beta2: read_f64(r)?,
        epsilon: read_f64(r)?,
    };
    let ids = params.param_ids();
    let count = read_u64(r)? as usize;
    check_dim("optimizer tensors", ids.len(), count)?;
    let mut state = AdamState::new(params, config);
    state.step = step;
    for k in 0..count {
        let len = read_u64(r)? as usize;
        check_dim("optimizer tensor length", state.first[k].len(), len)?;
        for i in 0..len {
            state.first[k][i] = read_f64(r)?;
        }
        for i in 0..len {
            state.second[k][i] = read_f64(r)?;
        }
    }
    Ok(state)
}

/// Produces a fresh training batch per request.
pub trait BatchSource {
    fn next_batch(&mut self) -> Result<SampleBatch>;
}

/// Draws batches from the problem's generative model with per-request seeds.
#[derive(Debug, Clone)]
pub struct SyntheticStream {
    instance: ProblemInstance,
    batch_size: usize,
    seed: u64,
    drawn: u64,
}

impl SyntheticStream {
    pub fn new(instance: ProblemInstance, batch_size: usize, seed: u64) -> Self {
        Self { instance, batch_size, seed, drawn: 0 }
    }
}

impl BatchSource for SyntheticStream {
    fn next_batch(&mut self) -> Result<SampleBatch> {
        let seed = child_seed(self.seed, self.drawn);
        self.drawn += 1;
        self.instance.sample(self.batch_size, seed)
    }
}

/// Which network to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    pub tying: Tying,
    #[serde(default)]
    pub lista_form: ListaForm,
    /// LAMP only: parameterize `B_t = A^T C_t`.
    #[serde(default)]
    pub structured: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub target_depth: usize,
    /// Steps of the phase that trains only the newest layer's scalars.
    pub new_layer_steps: usize,
    /// Steps of the phase that refines every parameter; 0 skips it.
    pub refine_steps: usize,
    pub new_layer_lr: f64,
    pub refine_lr: f64,
    /// Relative validation improvement that resets the patience counter.
    pub tolerance: f64,
    /// Validation checks without sufficient improvement before a phase stops.
    pub patience: usize,
    /// Optimizer steps between validation checks.
    pub check_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            target_depth: 10,
            new_layer_steps: 2000,
            refine_steps: 2000,
            new_layer_lr: 1e-3,
            refine_lr: 1e-4,
            tolerance: 1e-5,
            patience: 50,
            check_every: 1,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(format!("schedule: {what}")));
        if self.target_depth == 0 {
            return bad("target_depth must be >= 1");
        }
        if self.new_layer_steps == 0 {
            return bad("new_layer_steps must be >= 1");
        }
        if !(self.new_layer_lr > 0.0 && self.refine_lr > 0.0) {
            return bad("learning rates must be > 0");
        }
        if !(self.tolerance > 0.0) || self.patience == 0 || self.check_every == 0 {
            return bad("tolerance > 0, patience >= 1 and check_every >= 1 required");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    NewLayer,
    Refine,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::NewLayer => "new_layer",
            Phase::Refine => "refine",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub phase: Phase,
    pub layer: usize,
    pub step: usize,
    pub train_loss: f64,
    pub val_nmse_db: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// Validation NMSE (dB) of the network after each layer is finished.
    pub layer_nmse_db: Vec<f64>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "phase,layer,step,train_loss,val_nmse_db")?;
        for r in &self.rows {
            let val = r.val_nmse_db.map(|v| v.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{},{}", r.phase.name(), r.layer, r.step, r.train_loss, val)?;
        }
        Ok(())
    }
}

/// Loss and NMSE (dB) of the full network on a fixed batch.
pub fn evaluate(params: &NetworkParams, a: &DMatrix<f64>, batch: &SampleBatch) -> Result<(f64, f64)> {
    let tape = forward(params, a, &batch.measurements)?;
    Ok((loss(&tape, &batch.signals)?, nmse_db(&tape.x_out, &batch.signals)?))
}

/// NMSE (dB) after each layer `t = 1..=T`.
pub fn evaluate_per_layer(params: &NetworkParams, a: &DMatrix<f64>, batch: &SampleBatch) -> Result<Vec<f64>> {
    let tape = forward(params, a, &batch.measurements)?;
    (1..=tape.depth()).map(|t| nmse_db(tape.estimate(t), &batch.signals)).collect()
}

struct PhaseCtx<'a> {
    a: &'a DMatrix<f64>,
    validation: &'a SampleBatch,
    schedule: &'a TrainSchedule,
}

// Runs Adam on `trainable` for up to `budget` steps with early stopping and
// leaves `params` at the best validation point seen.
fn run_phase(
    ctx: &PhaseCtx,
    params: &mut NetworkParams,
    stream: &mut dyn BatchSource,
    trainable: &Trainable,
    lr: f64,
    budget: usize,
    phase: Phase,
    layer: usize,
    log: &mut TrainLog,
) -> Result<Option<AdamState>> {
    if budget == 0 {
        return Ok(None);
    }
    let sched = ctx.schedule;
    let mut adam = AdamState::new(params, AdamConfig::with_lr(lr));
    let (mut best, _) = evaluate(params, ctx.a, ctx.validation)?;
    let mut best_params = params.clone();
    let mut reference = best;
    let mut stale = 0;
    for step in 1..=budget {
        let batch = stream.next_batch()?;
        let (train_loss, grads) = match loss_and_gradients(params, ctx.a, &batch, trainable) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => {
                return Err(Error::TrainingDiverged { layer, log: Box::new(log.clone()) });
            }
            Err(e) => return Err(e),
        };
        adam_step(params, &grads, &mut adam)?;
        params.project();
        let mut row = LogRow { phase, layer, step, train_loss, val_nmse_db: None };
        if step % sched.check_every == 0 || step == budget {
            let (val, val_db) = evaluate(params, ctx.a, ctx.validation)?;
            if !val.is_finite() {
                log.rows.push(row);
                return Err(Error::TrainingDiverged { layer, log: Box::new(log.clone()) });
            }
            row.val_nmse_db = Some(val_db);
            if val < best {
                best = val;
                best_params.clone_from(params);
            }
            if val < reference * (1.0 - sched.tolerance) {
                reference = val;
                stale = 0;
            } else {
                stale += 1;
            }
        }
        log.rows.push(row);
        if stale >= sched.patience {
            break;
        }
    }
    *params = best_params;
    Ok(Some(adam))
}

/// Layer-wise training.
///
/// Layer 0 starts from `B_0` (or its `A^T C_0` form) and trains only its
/// scalars. Each later layer copies the previous layer's scalars (and, when
/// untied, gets fresh `B_0`-initialized matrices), trains its scalars alone,
/// then refines every parameter. LISTA thresholds start at
/// `alpha_0 * mean ||y||_2 / sqrt(M)` over the first training batch.
pub fn train_layerwise(
    spec: &NetworkSpec,
    a: &DMatrix<f64>,
    stream: &mut dyn BatchSource,
    validation: &SampleBatch,
    schedule: &TrainSchedule,
) -> Result<(NetworkParams, TrainLog)> {
    let out = train_layerwise_with(spec, a, stream, validation, schedule, |_, _| {})?;
    Ok((out.params, out.log))
}

/// Result of [`train_layerwise_with`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub log: TrainLog,
    /// Optimizer state at the end of the last phase that ran.
    pub optimizer: AdamState,
}

/// As [`train_layerwise`], calling `on_layer(depth, params)` after each layer.
pub fn train_layerwise_with(
    spec: &NetworkSpec,
    a: &DMatrix<f64>,
    stream: &mut dyn BatchSource,
    validation: &SampleBatch,
    schedule: &TrainSchedule,
    mut on_layer: impl FnMut(usize, &NetworkParams),
) -> Result<TrainOutcome> {
    schedule.validate()?;
    let (m, n) = a.shape();
    check_dim("validation rows", m, validation.measurements.nrows())?;
    check_dim("validation signal rows", n, validation.signals.nrows())?;
    let fresh = || initial_matrices(spec.kind, spec.lista_form, spec.structured, a);
    let (alpha0, beta0) = initial_scalars();
    let mut params = match (spec.kind, fresh()?) {
        (NetworkKind::Lamp, LayerMatrices::LampStructured { c }) => {
            NetworkParams::lamp_structured(spec.tying, n, c, alpha0, beta0)?
        }
        (NetworkKind::Lamp, mats) => NetworkParams::lamp(spec.tying, mats, alpha0, beta0)?,
        (NetworkKind::Lista, mats) => {
            let probe = stream.next_batch()?;
            let mean_norm = probe.measurements.column_iter().map(|c| c.norm()).sum::<f64>() / probe.len() as f64;
            NetworkParams::lista(spec.tying, mats, alpha0 * mean_norm / (m as f64).sqrt())?
        }
    };
    let ctx = PhaseCtx { a, validation, schedule };
    let mut log = TrainLog::default();
    let mut optimizer = None;
    for t in 0..schedule.target_depth {
        if t > 0 {
            let mats = match spec.tying {
                Tying::Tied => None,
                Tying::Untied => Some(fresh()?),
            };
            params.push_layer(mats)?;
        }
        let scalars = Trainable::only(params.layer_scalar_ids(t));
        let state = run_phase(&ctx, &mut params, stream, &scalars, schedule.new_layer_lr, schedule.new_layer_steps, Phase::NewLayer, t, &mut log)?;
        optimizer = state.or(optimizer);
        if t > 0 {
            let state = run_phase(&ctx, &mut params, stream, &Trainable::All, schedule.refine_lr, schedule.refine_steps, Phase::Refine, t, &mut log)?;
            optimizer = state.or(optimizer);
        }
        let (_, db) = evaluate(&params, a, validation)?;
        log.layer_nmse_db.push(db);
        on_layer(t + 1, &params);
    }
    let optimizer = optimizer.expect("new-layer phase has a nonzero budget");
    Ok(TrainOutcome { params, log, optimizer })
}

/// NMSE in dB between `x_hat` and `x_true`, for tapes produced by a network.
pub fn tape_nmse_db(tape: &ForwardTape, x_true: &DMatrix<f64>) -> Result<f64> {
    nmse_db(&tape.x_out, x_true)
}
