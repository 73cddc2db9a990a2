//! Unfolded networks: LISTA and LAMP.
//!
//! A network of depth `T` maps a batch of measurements `y` (M×D) to estimates
//! `x_T` (N×D), starting from `x_0 = 0`, `v_0 = y`.
//!
//! * LISTA, dense layers: `x_{t+1} = eta(S x_t + B y; lambda_t)`.
//! * LISTA, factored layers: `r_t = x_t + B_t v_t`, `x_{t+1} = eta(r_t; lambda_t)`,
//!   `v_{t+1} = y - A_t x_{t+1}`.
//! * LAMP: `x_{t+1} = beta_t eta(x_t + B_t v_t; alpha_t ||v_t||_2 / sqrt(M))`,
//!   `v_{t+1} = y - A x_{t+1} + (beta_t / M) ||x_{t+1}||_0 v_t`, thresholds
//!   computed per column. `B_t` is either dense or `A^T C_t`.
//!
//! Tied networks hold a single matrix slot shared by every layer; untied ones
//! hold one slot per layer. Scalars are always per layer.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::denoiser::shrink;
use crate::error::{check_dim, Error, Result};
use crate::io::{read_f64, read_matrix, read_u64, write_matrix};

/// Starting AMP threshold multiplier, the minimax value for sparsity 0.1.
pub const INITIAL_ALPHA: f64 = 1.1402;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Lista,
    Lamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tying {
    Tied,
    Untied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ListaForm {
    #[default]
    Dense,
    Factored,
}

/// Matrix parameters of one slot.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerMatrices {
    /// `b`: N×M, `s`: N×N.
    ListaDense { b: DMatrix<f64>, s: DMatrix<f64> },
    /// `a`: M×N, `b`: N×M.
    ListaFactored { a: DMatrix<f64>, b: DMatrix<f64> },
    /// `b`: N×M.
    LampDense { b: DMatrix<f64> },
    /// `c`: M×M, with `B = A^T C`.
    LampStructured { c: DMatrix<f64> },
}

impl LayerMatrices {
    fn tag(&self) -> u8 {
        match self {
            LayerMatrices::ListaDense { .. } => 0,
            LayerMatrices::ListaFactored { .. } => 1,
            LayerMatrices::LampDense { .. } => 2,
            LayerMatrices::LampStructured { .. } => 3,
        }
    }

    fn kind(&self) -> NetworkKind {
        match self {
            LayerMatrices::ListaDense { .. } | LayerMatrices::ListaFactored { .. } => NetworkKind::Lista,
            _ => NetworkKind::Lamp,
        }
    }

    pub fn storage(&self) -> usize {
        match self {
            LayerMatrices::ListaDense { b, s } => b.len() + s.len(),
            LayerMatrices::ListaFactored { a, b } => a.len() + b.len(),
            LayerMatrices::LampDense { b } => b.len(),
            LayerMatrices::LampStructured { c } => c.len(),
        }
    }

    fn check_shapes(&self, n: usize, m: usize) -> Result<()> {
        match self {
            LayerMatrices::ListaDense { b, s } => {
                check_dim("B rows", n, b.nrows())?;
                check_dim("B cols", m, b.ncols())?;
                check_dim("S rows", n, s.nrows())?;
                check_dim("S cols", n, s.ncols())
            }
            LayerMatrices::ListaFactored { a, b } => {
                check_dim("A_t rows", m, a.nrows())?;
                check_dim("A_t cols", n, a.ncols())?;
                check_dim("B rows", n, b.nrows())?;
                check_dim("B cols", m, b.ncols())
            }
            LayerMatrices::LampDense { b } => {
                check_dim("B rows", n, b.nrows())?;
                check_dim("B cols", m, b.ncols())
            }
            LayerMatrices::LampStructured { c } => {
                check_dim("C rows", m, c.nrows())?;
                check_dim("C cols", m, c.ncols())
            }
        }
    }

    fn matrices(&self) -> Vec<&DMatrix<f64>> {
        match self {
            LayerMatrices::ListaDense { b, s } => vec![b, s],
            LayerMatrices::ListaFactored { a, b } => vec![a, b],
            LayerMatrices::LampDense { b } => vec![b],
            LayerMatrices::LampStructured { c } => vec![c],
        }
    }
}

/// Identifies one learnable tensor. Matrix ids carry the slot index, scalar
/// ids the layer index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    B(usize),
    S(usize),
    A(usize),
    C(usize),
    Lambda(usize),
    Alpha(usize),
    Beta(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    kind: NetworkKind,
    tying: Tying,
    n: usize,
    m: usize,
    slots: Vec<LayerMatrices>,
    lambdas: Vec<f64>,
    alphas: Vec<f64>,
    betas: Vec<f64>,
}

impl NetworkParams {
    /// One-layer LISTA.
    pub fn lista(tying: Tying, first: LayerMatrices, lambda: f64) -> Result<Self> {
        Self::one_layer(NetworkKind::Lista, tying, first, vec![lambda], vec![], vec![])
    }

    /// One-layer LAMP.
    pub fn lamp(tying: Tying, first: LayerMatrices, alpha: f64, beta: f64) -> Result<Self> {
        Self::one_layer(NetworkKind::Lamp, tying, first, vec![], vec![alpha], vec![beta])
    }

    fn one_layer(
        kind: NetworkKind,
        tying: Tying,
        first: LayerMatrices,
        lambdas: Vec<f64>,
        alphas: Vec<f64>,
        betas: Vec<f64>,
    ) -> Result<Self> {
        if first.kind() != kind {
            return Err(Error::InvalidParameter("layer matrices do not match network kind".into()));
        }
        let (n, m) = match &first {
            LayerMatrices::ListaDense { b, .. }
            | LayerMatrices::ListaFactored { b, .. }
            | LayerMatrices::LampDense { b } => b.shape(),
            // C alone does not fix N; structured LAMP is built via `lamp_structured`.
            LayerMatrices::LampStructured { .. } => {
                return Err(Error::InvalidParameter(
                    "structured LAMP needs N: use NetworkParams::lamp_structured".into(),
                ))
            }
        };
        let p = Self {
            kind,
            tying,
            n,
            m,
            slots: vec![first],
            lambdas,
            alphas,
            betas,
        };
        p.validate()?;
        Ok(p)
    }

    /// One-layer LAMP with `B_0 = A^T C`, for signal dimension `n`.
    pub fn lamp_structured(tying: Tying, n: usize, c: DMatrix<f64>, alpha: f64, beta: f64) -> Result<Self> {
        let m = c.nrows();
        let p = Self {
            kind: NetworkKind::Lamp,
            tying,
            n,
            m,
            slots: vec![LayerMatrices::LampStructured { c }],
            lambdas: vec![],
            alphas: vec![alpha],
            betas: vec![beta],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.depth();
        if depth == 0 {
            return Err(Error::InvalidParameter("network depth must be >= 1".into()));
        }
        let expected_slots = match self.tying {
            Tying::Tied => 1,
            Tying::Untied => depth,
        };
        check_dim("matrix slots", expected_slots, self.slots.len())?;
        let first_tag = self.slots[0].tag();
        for slot in &self.slots {
            if slot.tag() != first_tag {
                return Err(Error::InvalidParameter("mixed layer forms".into()));
            }
            slot.check_shapes(self.n, self.m)?;
            if slot.matrices().iter().any(|m| m.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite("network matrices"));
            }
        }
        match self.kind {
            NetworkKind::Lista => {
                if !self.alphas.is_empty() || !self.betas.is_empty() {
                    return Err(Error::InvalidParameter("LISTA has no alpha/beta".into()));
                }
                if let Some(l) = self.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
                    return Err(Error::InvalidParameter(format!("LISTA threshold {l} is not >= 0")));
                }
            }
            NetworkKind::Lamp => {
                check_dim("beta count", self.alphas.len(), self.betas.len())?;
                if !self.lambdas.is_empty() {
                    return Err(Error::InvalidParameter("LAMP has no lambda".into()));
                }
                if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
                    return Err(Error::InvalidParameter(format!("LAMP alpha {a} is not > 0")));
                }
                if let Some(t) = self.betas.iter().position(|b| *b == 0.0 || !b.is_finite()) {
                    return Err(Error::InvalidParameter(format!("degenerate beta at layer {t}")));
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> NetworkKind {
        self.kind
    }

    pub fn tying(&self) -> Tying {
        self.tying
    }

    /// Signal dimension N.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Measurement dimension M.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn depth(&self) -> usize {
        self.lambdas.len().max(self.alphas.len())
    }

    pub fn is_structured(&self) -> bool {
        matches!(self.slots[0], LayerMatrices::LampStructured { .. })
    }

    pub fn lista_form(&self) -> Option<ListaForm> {
        match self.slots[0] {
            LayerMatrices::ListaDense { .. } => Some(ListaForm::Dense),
            LayerMatrices::ListaFactored { .. } => Some(ListaForm::Factored),
            _ => None,
        }
    }

    pub fn slot_of(&self, layer: usize) -> usize {
        match self.tying {
            Tying::Tied => 0,
            Tying::Untied => layer,
        }
    }

    pub fn slots(&self) -> &[LayerMatrices] {
        &self.slots
    }

    pub fn layer_matrices(&self, layer: usize) -> &LayerMatrices {
        &self.slots[self.slot_of(layer)]
    }

    /// Mutable access to the matrices used by `layer`; for a tied network this
    /// is the storage shared by all layers.
    pub fn layer_matrices_mut(&mut self, layer: usize) -> &mut LayerMatrices {
        let s = self.slot_of(layer);
        &mut self.slots[s]
    }

    pub fn lambda(&self, layer: usize) -> f64 {
        self.lambdas[layer]
    }

    pub fn alpha(&self, layer: usize) -> f64 {
        self.alphas[layer]
    }

    pub fn beta(&self, layer: usize) -> f64 {
        self.betas[layer]
    }

    pub fn set_lambda(&mut self, layer: usize, v: f64) {
        self.lambdas[layer] = v;
    }

    pub fn set_alpha(&mut self, layer: usize, v: f64) {
        self.alphas[layer] = v;
    }

    pub fn set_beta(&mut self, layer: usize, v: f64) {
        self.betas[layer] = v;
    }

    /// Appends a layer whose scalars copy the current last layer. Untied
    /// networks need `matrices` for the new slot; tied networks must pass `None`.
    pub fn push_layer(&mut self, matrices: Option<LayerMatrices>) -> Result<()> {
        match (self.tying, matrices) {
            (Tying::Tied, None) => {}
            (Tying::Untied, Some(mats)) => {
                if mats.tag() != self.slots[0].tag() {
                    return Err(Error::InvalidParameter("new layer has a different form".into()));
                }
                mats.check_shapes(self.n, self.m)?;
                self.slots.push(mats);
            }
            (Tying::Tied, Some(_)) => {
                return Err(Error::InvalidParameter("tied networks share their matrices".into()))
            }
            (Tying::Untied, None) => {
                return Err(Error::InvalidParameter("untied layers need their own matrices".into()))
            }
        }
        match self.kind {
            NetworkKind::Lista => {
                let l = *self.lambdas.last().expect("depth >= 1");
                self.lambdas.push(l);
            }
            NetworkKind::Lamp => {
                let a = *self.alphas.last().expect("depth >= 1");
                let b = *self.betas.last().expect("depth >= 1");
                self.alphas.push(a);
                self.betas.push(b);
            }
        }
        Ok(())
    }

    /// Total number of stored matrix entries.
    pub fn matrix_storage(&self) -> usize {
        self.slots.iter().map(LayerMatrices::storage).sum()
    }

    /// All learnable tensors: matrices slot by slot, then scalars layer by layer.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (i, slot) in self.slots.iter().enumerate() {
            match slot {
                LayerMatrices::ListaDense { .. } => ids.extend([ParamId::B(i), ParamId::S(i)]),
                LayerMatrices::ListaFactored { .. } => ids.extend([ParamId::A(i), ParamId::B(i)]),
                LayerMatrices::LampDense { .. } => ids.push(ParamId::B(i)),
                LayerMatrices::LampStructured { .. } => ids.push(ParamId::C(i)),
            }
        }
        for t in 0..self.depth() {
            match self.kind {
                NetworkKind::Lista => ids.push(ParamId::Lambda(t)),
                NetworkKind::Lamp => ids.extend([ParamId::Alpha(t), ParamId::Beta(t)]),
            }
        }
        ids
    }

    /// Scalar parameters of `layer` (the ones trained when a layer is added).
    pub fn layer_scalar_ids(&self, layer: usize) -> Vec<ParamId> {
        match self.kind {
            NetworkKind::Lista => vec![ParamId::Lambda(layer)],
            NetworkKind::Lamp => vec![ParamId::Alpha(layer), ParamId::Beta(layer)],
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        match id {
            ParamId::Lambda(t) => self.lambdas.get(t..t + 1),
            ParamId::Alpha(t) => self.alphas.get(t..t + 1),
            ParamId::Beta(t) => self.betas.get(t..t + 1),
            ParamId::B(s) | ParamId::S(s) | ParamId::A(s) | ParamId::C(s) => {
                match (self.slots.get(s)?, id) {
                    (LayerMatrices::ListaDense { b, .. }, ParamId::B(_))
                    | (LayerMatrices::ListaFactored { b, .. }, ParamId::B(_))
                    | (LayerMatrices::LampDense { b }, ParamId::B(_)) => Some(b.as_slice()),
                    (LayerMatrices::ListaDense { s, .. }, ParamId::S(_)) => Some(s.as_slice()),
                    (LayerMatrices::ListaFactored { a, .. }, ParamId::A(_)) => Some(a.as_slice()),
                    (LayerMatrices::LampStructured { c }, ParamId::C(_)) => Some(c.as_slice()),
                    _ => None,
                }
            }
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut [f64]> {
        match id {
            ParamId::Lambda(t) => self.lambdas.get_mut(t..t + 1),
            ParamId::Alpha(t) => self.alphas.get_mut(t..t + 1),
            ParamId::Beta(t) => self.betas.get_mut(t..t + 1),
            ParamId::B(s) | ParamId::S(s) | ParamId::A(s) | ParamId::C(s) => {
                match (self.slots.get_mut(s)?, id) {
                    (LayerMatrices::ListaDense { b, .. }, ParamId::B(_))
                    | (LayerMatrices::ListaFactored { b, .. }, ParamId::B(_))
                    | (LayerMatrices::LampDense { b }, ParamId::B(_)) => Some(b.as_mut_slice()),
                    (LayerMatrices::ListaDense { s, .. }, ParamId::S(_)) => Some(s.as_mut_slice()),
                    (LayerMatrices::ListaFactored { a, .. }, ParamId::A(_)) => Some(a.as_mut_slice()),
                    (LayerMatrices::LampStructured { c }, ParamId::C(_)) => Some(c.as_mut_slice()),
                    _ => None,
                }
            }
        }
    }

    /// `B_t` as a dense N×M matrix (LAMP only); `a` is needed for structured slots.
    pub fn lamp_b(&self, layer: usize, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self.layer_matrices(layer) {
            LayerMatrices::LampDense { b } => Ok(b.clone()),
            LayerMatrices::LampStructured { c } => {
                check_dim("A rows", self.m, a.nrows())?;
                check_dim("A cols", self.n, a.ncols())?;
                Ok(a.tr_mul(c))
            }
            _ => Err(Error::InvalidParameter("not a LAMP network".into())),
        }
    }

    /// Copy with every structured slot replaced by its dense `A^T C`.
    pub fn materialized(&self, a: &DMatrix<f64>) -> Result<NetworkParams> {
        let mut out = self.clone();
        for slot in out.slots.iter_mut() {
            if let LayerMatrices::LampStructured { c } = slot {
                check_dim("A rows", self.m, a.nrows())?;
                check_dim("A cols", self.n, a.ncols())?;
                *slot = LayerMatrices::LampDense { b: a.tr_mul(c) };
            }
        }
        Ok(out)
    }

    /// Clamps scalars back into their valid ranges after an optimizer update:
    /// `lambda >= 0`, `alpha >= ALPHA_FLOOR`, `|beta| >= BETA_FLOOR`.
    pub fn project(&mut self) {
        self.lambdas.iter_mut().for_each(|l| *l = l.max(0.0));
        self.alphas.iter_mut().for_each(|a| *a = a.max(ALPHA_FLOOR));
        for b in self.betas.iter_mut() {
            if b.abs() < BETA_FLOOR {
                *b = BETA_FLOOR.copysign(*b);
            }
        }
    }
}

pub const ALPHA_FLOOR: f64 = 1e-6;
pub const BETA_FLOOR: f64 = 1e-6;

/// Regularized pseudo-inverse `B_0 = gamma^-1 A^T (A A^T + I)^-1`, scaled so
/// that `tr(A B_0) = N`.
pub fn b0_init(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(c0_init(a)?.0)
}

/// `(B_0, C_0)` with `B_0 = A^T C_0`, `C_0 = gamma^-1 (A A^T + I)^-1`.
pub fn c0_init(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("measurement matrix"));
    }
    let (m, n) = a.shape();
    let gram = a * a.transpose() + DMatrix::<f64>::identity(m, m);
    let chol = gram
        .cholesky()
        .ok_or(Error::RankDeficient("A A^T + I"))?;
    let inv = chol.inverse();
    // (A A^T + I)^-1 A, whose transpose is the unnormalized B.
    let z = &inv * a;
    let trace = a.component_mul(&z).sum();
    let gamma = trace / n as f64;
    if !(gamma > 0.0) {
        return Err(Error::RankDeficient("A (zero trace in B_0 normalization)"));
    }
    Ok((z.transpose() / gamma, inv / gamma))
}

/// Cached forward quantities of one layer.
#[derive(Debug, Clone)]
pub struct LayerRecord {
    /// `x_t`.
    pub x_in: DMatrix<f64>,
    /// `v_t`; absent for dense LISTA layers.
    pub v_in: Option<DMatrix<f64>>,
    /// Denoiser input `r_t`.
    pub r: DMatrix<f64>,
    /// `eta(r_t; lambda_t)`, before any `beta_t` scaling. Its nonzero pattern is
    /// the denoiser's derivative mask.
    pub eta: DMatrix<f64>,
    /// Threshold per column.
    pub lambdas: Vec<f64>,
    /// `||v_t||_2` per column (LAMP).
    pub v_norms: Vec<f64>,
    /// `||x_{t+1}||_0` per column.
    pub counts: Vec<usize>,
    /// Onsager gain `beta_t ||x_{t+1}||_0 / M` per column (LAMP).
    pub onsager: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardTape {
    pub layers: Vec<LayerRecord>,
    /// `x_T`.
    pub x_out: DMatrix<f64>,
    /// `v_T`, for networks that compute one.
    pub v_out: Option<DMatrix<f64>>,
}

impl ForwardTape {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `x_t` for `t = 0..=T`.
    pub fn estimate(&self, t: usize) -> &DMatrix<f64> {
        if t == self.layers.len() {
            &self.x_out
        } else {
            &self.layers[t].x_in
        }
    }
}

fn threshold_columns(r: &DMatrix<f64>, lambdas: &[f64]) -> (DMatrix<f64>, Vec<usize>) {
    let mut eta = r.clone();
    let mut counts = Vec::with_capacity(r.ncols());
    for (j, mut col) in eta.column_iter_mut().enumerate() {
        let lam = lambdas[j];
        let mut nnz = 0;
        for v in col.iter_mut() {
            *v = shrink(*v, lam);
            nnz += (*v != 0.0) as usize;
        }
        counts.push(nnz);
    }
    (eta, counts)
}

pub fn lista_forward(params: &NetworkParams, y: &DMatrix<f64>) -> Result<ForwardTape> {
    if params.kind != NetworkKind::Lista {
        return Err(Error::InvalidParameter("lista_forward needs a LISTA network".into()));
    }
    check_dim("y rows", params.m, y.nrows())?;
    let (n, d) = (params.n, y.ncols());
    let mut x = DMatrix::<f64>::zeros(n, d);
    let mut v = y.clone();
    let mut layers = Vec::with_capacity(params.depth());
    // B y per slot, reused by tied dense layers.
    let mut by_cache: Option<(usize, DMatrix<f64>)> = None;
    for t in 0..params.depth() {
        let lam = params.lambdas[t];
        let slot = params.slot_of(t);
        let lambdas = vec![lam; d];
        match params.layer_matrices(t) {
            LayerMatrices::ListaDense { b, s } => {
                if by_cache.as_ref().is_none_or(|(k, _)| *k != slot) {
                    by_cache = Some((slot, b * y));
                }
                let by = &by_cache.as_ref().expect("cached").1;
                let r = if t == 0 { by.clone() } else { s * &x + by };
                let (eta, counts) = threshold_columns(&r, &lambdas);
                layers.push(LayerRecord {
                    x_in: std::mem::replace(&mut x, eta.clone()),
                    v_in: None,
                    r,
                    eta,
                    lambdas,
                    v_norms: vec![],
                    counts,
                    onsager: vec![],
                });
            }
            LayerMatrices::ListaFactored { a, b } => {
                let r = &x + b * &v;
                let (eta, counts) = threshold_columns(&r, &lambdas);
                let v_next = y - a * &eta;
                layers.push(LayerRecord {
                    x_in: std::mem::replace(&mut x, eta.clone()),
                    v_in: Some(std::mem::replace(&mut v, v_next)),
                    r,
                    eta,
                    lambdas,
                    v_norms: vec![],
                    counts,
                    onsager: vec![],
                });
            }
            _ => unreachable!("validated LISTA network"),
        }
    }
    let v_out = (params.lista_form() == Some(ListaForm::Factored)).then_some(v);
    Ok(ForwardTape {
        layers,
        x_out: x,
        v_out,
    })
}

pub fn lamp_forward(params: &NetworkParams, a: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<ForwardTape> {
    if params.kind != NetworkKind::Lamp {
        return Err(Error::InvalidParameter("lamp_forward needs a LAMP network".into()));
    }
    check_dim("A rows", params.m, a.nrows())?;
    check_dim("A cols", params.n, a.ncols())?;
    check_dim("y rows", params.m, y.nrows())?;
    if let Some(t) = params.betas.iter().position(|b| *b == 0.0) {
        return Err(Error::InvalidParameter(format!("degenerate beta = 0 at layer {t}")));
    }
    let (n, d) = (params.n, y.ncols());
    let m = params.m as f64;
    let sqrt_m = m.sqrt();
    let mut x = DMatrix::<f64>::zeros(n, d);
    let mut v = y.clone();
    let mut layers = Vec::with_capacity(params.depth());
    for t in 0..params.depth() {
        let (alpha, beta) = (params.alphas[t], params.betas[t]);
        let z = match params.layer_matrices(t) {
            LayerMatrices::LampDense { b } => b * &v,
            LayerMatrices::LampStructured { c } => a.tr_mul(&(c * &v)),
            _ => unreachable!("validated LAMP network"),
        };
        let r = &x + z;
        let v_norms: Vec<f64> = v.column_iter().map(|c| c.norm()).collect();
        let lambdas: Vec<f64> = v_norms.iter().map(|nv| alpha * nv / sqrt_m).collect();
        let (eta, counts) = threshold_columns(&r, &lambdas);
        let x_next = &eta * beta;
        let onsager: Vec<f64> = counts.iter().map(|&k| beta * k as f64 / m).collect();
        let mut v_next = y - a * &x_next;
        for (j, g) in onsager.iter().enumerate() {
            if *g != 0.0 {
                v_next.column_mut(j).axpy(*g, &v.column(j), 1.0);
            }
        }
        layers.push(LayerRecord {
            x_in: std::mem::replace(&mut x, x_next),
            v_in: Some(std::mem::replace(&mut v, v_next)),
            r,
            eta,
            lambdas,
            v_norms,
            counts,
            onsager,
        });
    }
    Ok(ForwardTape {
        layers,
        x_out: x,
        v_out: Some(v),
    })
}

/// Dispatches on the network kind; `a` is ignored by LISTA.
pub fn forward(params: &NetworkParams, a: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<ForwardTape> {
    match params.kind {
        NetworkKind::Lista => lista_forward(params, y),
        NetworkKind::Lamp => lamp_forward(params, a, y),
    }
}

/// The matrices a freshly initialized layer starts from.
pub fn initial_matrices(
    kind: NetworkKind,
    lista_form: ListaForm,
    structured: bool,
    a: &DMatrix<f64>,
) -> Result<LayerMatrices> {
    let (b0, c0) = c0_init(a)?;
    Ok(match (kind, lista_form, structured) {
        (NetworkKind::Lamp, _, false) => LayerMatrices::LampDense { b: b0 },
        (NetworkKind::Lamp, _, true) => LayerMatrices::LampStructured { c: c0 },
        (NetworkKind::Lista, ListaForm::Dense, _) => {
            let n = a.ncols();
            let s = DMatrix::<f64>::identity(n, n) - &b0 * a;
            LayerMatrices::ListaDense { b: b0, s }
        }
        (NetworkKind::Lista, ListaForm::Factored, _) => LayerMatrices::ListaFactored { a: a.clone(), b: b0 },
    })
}

// Container layout (all integers u64 LE unless noted):
//   magic "UNFOLDNT", version u32 LE,
//   kind u8, tying u8, form u8, reserved u8,
//   depth, n, m, slot count,
//   per slot: its matrices in `io::write_matrix` format,
//   per layer: lambda (LISTA) or alpha, beta (LAMP) as f64 LE.
const MAGIC: &[u8; 8] = b"UNFOLDNT";
const VERSION: u32 = 1;

pub fn write_params<W: Write>(w: &mut W, p: &NetworkParams) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let kind = match p.kind {
        NetworkKind::Lista => 0u8,
        NetworkKind::Lamp => 1,
    };
    let tying = match p.tying {
        Tying::Tied => 0u8,
        Tying::Untied => 1,
    };
    w.write_all(&[kind, tying, p.slots[0].tag(), 0])?;
    for v in [p.depth(), p.n, p.m, p.slots.len()] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for slot in &p.slots {
        for mat in slot.matrices() {
            write_matrix(w, mat)?;
        }
    }
    for t in 0..p.depth() {
        match p.kind {
            NetworkKind::Lista => w.write_all(&p.lambdas[t].to_le_bytes())?,
            NetworkKind::Lamp => {
                w.write_all(&p.alphas[t].to_le_bytes())?;
                w.write_all(&p.betas[t].to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_params<R: Read>(r: &mut R) -> Result<NetworkParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a network container".into()));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let mut flags = [0u8; 4];
    r.read_exact(&mut flags)?;
    let kind = match flags[0] {
        0 => NetworkKind::Lista,
        1 => NetworkKind::Lamp,
        k => return Err(Error::Format(format!("unknown network kind {k}"))),
    };
    let tying = match flags[1] {
        0 => Tying::Tied,
        1 => Tying::Untied,
        k => return Err(Error::Format(format!("unknown tying {k}"))),
    };
    let form = flags[2];
    let depth = read_u64(r)? as usize;
    let n = read_u64(r)? as usize;
    let m = read_u64(r)? as usize;
    let slot_count = read_u64(r)? as usize;
    if depth == 0 || depth > 1 << 16 || slot_count > depth {
        return Err(Error::Format(format!("implausible depth {depth} / slots {slot_count}")));
    }
    let mut slots = Vec::with_capacity(slot_count);
    for _ in 0..slot_count {
        let slot = match form {
            0 => LayerMatrices::ListaDense { b: read_matrix(r)?, s: read_matrix(r)? },
            1 => LayerMatrices::ListaFactored { a: read_matrix(r)?, b: read_matrix(r)? },
            2 => LayerMatrices::LampDense { b: read_matrix(r)? },
            3 => LayerMatrices::LampStructured { c: read_matrix(r)? },
            f => return Err(Error::Format(format!("unknown layer form {f}"))),
        };
        slots.push(slot);
    }
    let (mut lambdas, mut alphas, mut betas) = (vec![], vec![], vec![]);
    for _ in 0..depth {
        match kind {
            NetworkKind::Lista => lambdas.push(read_f64(r)?),
            NetworkKind::Lamp => {
                alphas.push(read_f64(r)?);
                betas.push(read_f64(r)?);
            }
        }
    }
    let p = NetworkParams {
        kind,
        tying,
        n,
        m,
        slots,
        lambdas,
        alphas,
        betas,
    };
    p.validate().map_err(|e| Error::Format(format!("invalid network: {e}")))?;
    Ok(p)
}
