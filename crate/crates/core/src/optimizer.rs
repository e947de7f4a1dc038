//! DCT-AdamW: AdamW whose moments live in a rank-`r` subspace chosen from a
//! shared orthogonal basis, with momentum rotation between subspaces and
//! optional (quantized) error feedback.
//!
//! One call to [`DctAdamW::step`] performs, for `t = state.step + 1`:
//!
//! 1. `G_t = grad + EF` (the buffer written at step `t - 1`)
//! 2. `R = update_subspace(G_t)`; re-ranks at `t = 1` and whenever `t % T_u == 0`
//! 3. `g_t = down(G_t)`
//! 4. `EF = G_t - up(g_t)`
//! 5. `m_t = b1 * rot(m) + (1 - b1) * g_t`
//! 6. `v_t = b2 * |rot(v)| + (1 - b2) * g_t^2`
//! 7. bias-correct both moments
//! 8. `u = m_hat / (eps + sqrt(v_hat))`
//! 9. `theta -= lr * up(u) + lr * weight_decay * theta`

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::efq::{accumulate_error, EfMode, ErrorFeedback};
use crate::error::{ensure_finite, invalid, Result};
use crate::projector::{
    low_rank_from_scores, random_semi_orthogonal, randperm_selection, resolve_side, select,
    svd_projector, switch_map, DenseProjector, NormMode, Projection, ProjectorKind, Selection, Side,
};
use crate::rng::derive_seed;
use crate::transform::{BasisKind, BasisRegistry, OrthoBasis};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps between subspace refreshes (`T_u`).
    pub update_period: u64,
    pub rank: usize,
    pub ef_mode: EfMode,
    pub projector: ProjectorKind,
    pub norm_mode: NormMode,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            update_period: 200,
            rank: 8,
            ef_mode: EfMode::None,
            projector: ProjectorKind::DctSelect,
            norm_mode: NormMode::L1,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("lr must be positive, got {}", self.lr)));
        }
        AdamParams::from(self).validate()?;
        if self.update_period == 0 {
            return Err(invalid("update period must be at least 1"));
        }
        if self.rank == 0 {
            return Err(invalid("rank must be at least 1"));
        }
        Ok(())
    }
}

/// Moment rotation between consecutive subspaces.
#[derive(Debug, Clone, PartialEq)]
pub enum Rotation {
    Identity,
    /// Sparse form of a 0/1 switching matrix: entry `b` names the previous
    /// slot that holds the same basis column as current slot `b`.
    Reindex(Vec<Option<usize>>),
    Dense(DMatrix<f64>),
}

impl Rotation {
    /// `m R` for right projection, `R^T m` for left, so `R` always acts on
    /// the rank axis.
    pub fn apply(&self, m: &DMatrix<f64>, side: Side) -> DMatrix<f64> {
        match self {
            Rotation::Identity => m.clone(),
            Rotation::Reindex(map) => match side {
                Side::Right => DMatrix::from_fn(m.nrows(), map.len(), |i, b| {
                    map[b].map_or(0.0, |a| m[(i, a)])
                }),
                Side::Left => DMatrix::from_fn(map.len(), m.ncols(), |b, j| {
                    map[b].map_or(0.0, |a| m[(a, j)])
                }),
            },
            Rotation::Dense(r) => match side {
                Side::Right => m * r,
                Side::Left => r.tr_mul(m),
            },
        }
    }

    /// `|rot(v)|`, which keeps the second moment nonnegative.
    pub fn apply_abs(&self, v: &DMatrix<f64>, side: Side) -> DMatrix<f64> {
        match self {
            // Reindexing a nonnegative matrix stays nonnegative.
            Rotation::Identity | Rotation::Reindex(_) => self.apply(v, side),
            Rotation::Dense(_) => self.apply(v, side).abs(),
        }
    }
}

/// Per-layer optimizer state.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    pub(crate) side: Side,
    pub(crate) m: DMatrix<f64>,
    pub(crate) v: DMatrix<f64>,
    pub(crate) current: Option<Projection>,
    pub(crate) previous: Option<Projection>,
    pub(crate) ef: ErrorFeedback,
    pub(crate) step: u64,
    pub(crate) refreshes: u64,
    pub(crate) stream: u64,
}

impl LayerState {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn error_feedback(&self) -> &ErrorFeedback {
        &self.ef
    }

    pub fn current(&self) -> Option<&Projection> {
        self.current.as_ref()
    }

    pub fn previous(&self) -> Option<&Projection> {
        self.previous.as_ref()
    }

    pub fn current_selection(&self) -> Option<&Selection> {
        self.current.as_ref().and_then(Projection::selection)
    }

    pub fn previous_selection(&self) -> Option<&Selection> {
        self.previous.as_ref().and_then(Projection::selection)
    }

    /// Bytes held by this layer's optimizer state: moments, error feedback,
    /// and projection storage (4-byte indices, or dense matrices).
    pub fn state_bytes(&self) -> usize {
        let proj = |p: &Option<Projection>| match p {
            None => 0,
            Some(Projection::Columns { selection, .. }) => 4 * selection.rank(),
            Some(Projection::Dense(d)) => 8 * d.matrix.len(),
        };
        8 * (self.m.len() + self.v.len()) + self.ef.memory_bytes() + proj(&self.current) + proj(&self.previous)
    }
}

/// What happened during one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub refreshed: bool,
    /// `||G_t||_F^2`, including error feedback.
    pub grad_energy: f64,
    /// `||G_t - up(down(G_t))||_F^2`.
    pub residual_energy: f64,
}

impl StepInfo {
    pub fn recon_error_ratio(&self) -> f64 {
        if self.grad_energy > 0.0 {
            self.residual_energy / self.grad_energy
        } else {
            0.0
        }
    }
}

pub struct DctAdamW {
    hyper: Hyper,
    basis: Arc<OrthoBasis>,
    identities: BasisRegistry,
}

impl DctAdamW {
    pub fn new(hyper: Hyper, basis: Arc<OrthoBasis>) -> Result<Self> {
        hyper.validate()?;
        Ok(Self { hyper, basis, identities: BasisRegistry::new() })
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    pub fn basis(&self) -> &Arc<OrthoBasis> {
        &self.basis
    }

    fn uses_shared_basis(&self) -> bool {
        matches!(self.hyper.projector, ProjectorKind::DctSelect | ProjectorKind::IdentityCols)
    }

    /// Fresh state for a `rows x cols` parameter. `stream` distinguishes the
    /// random draws of different layers under one seed.
    pub fn init_state(&self, rows: usize, cols: usize, stream: u64) -> Result<LayerState> {
        let r = self.hyper.rank;
        if r > rows.min(cols) {
            return Err(invalid(format!("rank {r} exceeds min({rows}, {cols})")));
        }
        let side = if self.uses_shared_basis() {
            resolve_side(rows, cols, self.basis.order())?
        } else {
            Side::for_shape(rows, cols)
        };
        let (mr, mc) = match side {
            Side::Right => (rows, r),
            Side::Left => (r, cols),
        };
        Ok(LayerState {
            rows,
            cols,
            side,
            m: DMatrix::zeros(mr, mc),
            v: DMatrix::zeros(mr, mc),
            current: None,
            previous: None,
            ef: ErrorFeedback::new(self.hyper.ef_mode, rows, cols)?,
            step: 0,
            refreshes: 0,
            stream,
        })
    }

    /// Builds a new projection for `g`, plus the low-rank gradient when it
    /// falls out of the ranking for free.
    fn fresh_projection(
        &self,
        g: &DMatrix<f64>,
        state: &LayerState,
    ) -> Result<(Projection, Option<DMatrix<f64>>)> {
        let h = &self.hyper;
        let k = state.side.basis_order(state.rows, state.cols);
        let draw_seed = |seed: u64| derive_seed(seed, &[state.stream, state.refreshes]);
        Ok(match h.projector {
            ProjectorKind::DctSelect => {
                let (selection, s) = select(g, &self.basis, h.rank, h.norm_mode)?;
                debug_assert_eq!(selection.side(), state.side);
                let low = low_rank_from_scores(&s, &selection);
                (Projection::Columns { basis: Arc::clone(&self.basis), selection }, Some(low))
            }
            ProjectorKind::IdentityCols => {
                let selection = Selection::new((0..h.rank).collect(), state.side, h.norm_mode, k)?;
                (Projection::Columns { basis: Arc::clone(&self.basis), selection }, None)
            }
            ProjectorKind::RandPerm { seed } => {
                let selection = randperm_selection(k, h.rank, draw_seed(seed))?.with_side(state.side);
                let basis = self.identities.get(BasisKind::Identity, k)?;
                (Projection::Columns { basis, selection }, None)
            }
            ProjectorKind::RandomSemiOrthogonal { seed } => {
                let matrix = random_semi_orthogonal(k, h.rank, draw_seed(seed))?;
                (Projection::Dense(DenseProjector { matrix, side: state.side }), None)
            }
            ProjectorKind::Svd => (Projection::Dense(svd_projector(g, h.rank)?), None),
        })
    }

    /// Refreshes the subspace when due and returns the switching rotation,
    /// along with the low-rank gradient if the refresh produced it.
    pub fn update_subspace(
        &self,
        g: &DMatrix<f64>,
        state: &mut LayerState,
    ) -> Result<(Rotation, Option<DMatrix<f64>>)> {
        if g.shape() != (state.rows, state.cols) {
            return Err(invalid("gradient shape does not match layer state"));
        }
        let t = state.step + 1;
        if t > 1 {
            state.previous = state.current.clone();
        }
        let due = t == 1 || state.current.is_none() || t.is_multiple_of(self.hyper.update_period);
        if !due {
            return Ok((Rotation::Identity, None));
        }
        let (fresh, low) = self.fresh_projection(g, state)?;
        state.refreshes += 1;
        let rotation = match (&state.previous, &fresh) {
            (None, _) => Rotation::Identity,
            (
                Some(Projection::Columns { selection: prev, .. }),
                Projection::Columns { selection: crt, .. },
            ) => {
                let map = switch_map(prev, crt)?;
                if map.iter().enumerate().all(|(b, a)| *a == Some(b)) {
                    Rotation::Identity
                } else {
                    Rotation::Reindex(map)
                }
            }
            (Some(Projection::Dense(prev)), Projection::Dense(crt)) => {
                Rotation::Dense(prev.matrix.tr_mul(&crt.matrix))
            }
            _ => return Err(invalid("projection kind changed between refreshes")),
        };
        state.current = Some(fresh);
        Ok((rotation, low))
    }

    pub fn step(&self, theta: &mut DMatrix<f64>, grad: &DMatrix<f64>, state: &mut LayerState) -> Result<StepInfo> {
        self.step_with_lr(theta, grad, state, self.hyper.lr)
    }

    /// One optimizer step at learning rate `lr` (for schedules).
    pub fn step_with_lr(
        &self,
        theta: &mut DMatrix<f64>,
        grad: &DMatrix<f64>,
        state: &mut LayerState,
        lr: f64,
    ) -> Result<StepInfo> {
        let h = &self.hyper;
        if theta.shape() != grad.shape() || grad.shape() != (state.rows, state.cols) {
            return Err(invalid("parameter, gradient and state shapes disagree"));
        }
        ensure_finite(grad, "gradient")?;

        let full = match state.ef.value() {
            Some(ef) => grad + ef,
            None => grad.clone(),
        };
        let refreshed_before = state.refreshes;
        let (rotation, shortcut) = self.update_subspace(&full, state)?;
        let projection = state.current.as_ref().expect("projection set by update_subspace");
        let low = match shortcut {
            Some(low) => low,
            None => projection.down(&full)?,
        };
        let residual_energy = accumulate_error(&mut state.ef, &full, &low, projection)?;

        let side = state.side;
        state.m = rotation.apply(&state.m, side) * h.beta1 + &low * (1.0 - h.beta1);
        state.v = rotation.apply_abs(&state.v, side) * h.beta2 + low.component_mul(&low) * (1.0 - h.beta2);

        let t = state.step + 1;
        let bc1 = 1.0 - h.beta1.powi(t as i32);
        let bc2 = 1.0 - h.beta2.powi(t as i32);
        let u = state.m.zip_map(&state.v, |m, v| (m / bc1) / (h.eps + (v / bc2).sqrt()));
        let update = projection.up(&u)?;
        theta.zip_apply(&update, |p, d| *p = *p - lr * d - lr * h.weight_decay * *p);
        state.step = t;

        Ok(StepInfo {
            refreshed: state.refreshes > refreshed_before,
            grad_energy: full.norm_squared(),
            residual_energy,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl From<&Hyper> for AdamParams {
    fn from(h: &Hyper) -> Self {
        Self { beta1: h.beta1, beta2: h.beta2, eps: h.eps, weight_decay: h.weight_decay }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(invalid("eps must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight decay must be nonnegative"));
        }
        Ok(())
    }
}

/// Full-rank Adam moments for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub step: u64,
}

impl AdamMoments {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { m: DMatrix::zeros(rows, cols), v: DMatrix::zeros(rows, cols), step: 0 }
    }

    pub fn state_bytes(&self) -> usize {
        8 * (self.m.len() + self.v.len())
    }
}

/// Textbook AdamW with bias correction and decoupled weight decay.
pub fn adamw_reference_step(
    theta: &mut DMatrix<f64>,
    grad: &DMatrix<f64>,
    moments: &mut AdamMoments,
    params: &AdamParams,
    lr: f64,
) -> Result<()> {
    if theta.shape() != grad.shape() || moments.m.shape() != grad.shape() {
        return Err(invalid("parameter, gradient and moment shapes disagree"));
    }
    ensure_finite(grad, "gradient")?;
    ensure_finite(theta, "parameter")?;
    let t = moments.step + 1;
    let bc1 = 1.0 - params.beta1.powi(t as i32);
    let bc2 = 1.0 - params.beta2.powi(t as i32);
    for k in 0..grad.len() {
        let g = grad[k];
        moments.m[k] = params.beta1 * moments.m[k] + (1.0 - params.beta1) * g;
        moments.v[k] = params.beta2 * moments.v[k] + (1.0 - params.beta2) * g * g;
        let u = (moments.m[k] / bc1) / (params.eps + (moments.v[k] / bc2).sqrt());
        theta[k] = theta[k] - lr * u - lr * params.weight_decay * theta[k];
    }
    moments.step = t;
    Ok(())
}
