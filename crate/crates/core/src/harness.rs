//! Small two-layer regression and classification tasks with analytic
//! gradients, used to compare projectors end to end.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::optimizer::{adamw_reference_step, AdamMoments, AdamParams, DctAdamW, Hyper, LayerState};
use crate::rng::{derive_seed, gaussian_matrix, seeded};
use crate::transform::{BasisKind, OrthoBasis};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
        }
    }

    /// Derivative in terms of the pre-activation `z` and output `h`.
    fn derivative(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Squared error summed over outputs, averaged over the batch.
    #[default]
    Mse,
    /// Softmax cross-entropy against one-hot rows, averaged over the batch.
    SoftmaxCe,
}

/// `y = act(x W1) W2`, no biases.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub activation: Activation,
}

impl MlpModel {
    /// Gaussian init with variance `1 / fan_in`.
    pub fn init(d_in: usize, d_h: usize, d_out: usize, activation: Activation, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let w1 = gaussian_matrix(&mut rng, d_in, d_h) / (d_in as f64).sqrt();
        let w2 = gaussian_matrix(&mut rng, d_h, d_out) / (d_h as f64).sqrt();
        Self { w1, w2, activation }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        (x * &self.w1).map(|z| self.activation.apply(z)) * &self.w2
    }
}

pub struct Gradients {
    pub loss: f64,
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
}

fn loss_and_output_grad(pred: &DMatrix<f64>, y: &DMatrix<f64>, loss: Loss) -> (f64, DMatrix<f64>) {
    let b = pred.nrows() as f64;
    match loss {
        Loss::Mse => {
            let diff = pred - y;
            (diff.norm_squared() / b, diff * (2.0 / b))
        }
        Loss::SoftmaxCe => {
            let mut total = 0.0;
            let mut grad = DMatrix::zeros(pred.nrows(), pred.ncols());
            for i in 0..pred.nrows() {
                let row = pred.row(i);
                let mx = row.max();
                let lse = mx + row.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
                for j in 0..pred.ncols() {
                    let p = (pred[(i, j)] - lse).exp();
                    total -= y[(i, j)] * (pred[(i, j)] - lse);
                    grad[(i, j)] = (p - y[(i, j)]) / b;
                }
            }
            (total / b, grad)
        }
    }
}

/// Loss and analytic gradients of both weight matrices on one batch.
pub fn forward_backward(model: &MlpModel, x: &DMatrix<f64>, y: &DMatrix<f64>, loss: Loss) -> Result<Gradients> {
    if x.ncols() != model.w1.nrows()
        || model.w1.ncols() != model.w2.nrows()
        || y.ncols() != model.w2.ncols()
        || x.nrows() != y.nrows()
        || x.nrows() == 0
    {
        return Err(invalid("batch and model shapes disagree"));
    }
    let z = x * &model.w1;
    let h = z.map(|v| model.activation.apply(v));
    let pred = &h * &model.w2;
    let (value, d_pred) = loss_and_output_grad(&pred, y, loss);
    if !value.is_finite() || pred.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("forward pass".into()));
    }
    let w2 = h.tr_mul(&d_pred);
    let d_h = &d_pred * model.w2.transpose();
    let d_z = DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| {
        d_h[(i, j)] * model.activation.derivative(z[(i, j)], h[(i, j)])
    });
    let w1 = x.tr_mul(&d_z);
    Ok(Gradients { loss: value, w1, w2 })
}

/// Loss over a full dataset.
pub fn evaluate(model: &MlpModel, x: &DMatrix<f64>, y: &DMatrix<f64>, loss: Loss) -> f64 {
    loss_and_output_grad(&model.predict(x), y, loss).0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    PlantedLowRankRegression,
    SyntheticClassification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub d_in: usize,
    pub d_h: usize,
    pub d_out: usize,
    pub n_samples: usize,
    pub teacher_rank: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::PlantedLowRankRegression,
            d_in: 64,
            d_h: 64,
            d_out: 64,
            n_samples: 1024,
            teacher_rank: 4,
            noise_std: 0.0,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_h == 0 || self.d_out == 0 || self.n_samples == 0 {
            return Err(invalid("task dimensions must be positive"));
        }
        if self.teacher_rank == 0 || self.teacher_rank > self.d_in.min(self.d_out) {
            return Err(invalid(format!(
                "teacher rank {} must be in 1..=min(d_in, d_out)",
                self.teacher_rank
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(invalid("noise_std must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    /// `A` (`d_in x k`) and `B` (`k x d_out`) of the planted teacher `X A B`.
    pub teacher: (DMatrix<f64>, DMatrix<f64>),
}

/// Draws inputs `X ~ N(0, 1)` and a rank-`k` teacher `A B` with
/// `A ~ N(0, 1/d_in)`, `B ~ N(0, 1/k)`, so teacher outputs have unit
/// variance. Regression targets are `X A B + noise`; classification targets
/// are one-hot rows at the argmax of the same quantity.
pub fn gen_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let a = gaussian_matrix(&mut rng, spec.d_in, spec.teacher_rank) / (spec.d_in as f64).sqrt();
    let b = gaussian_matrix(&mut rng, spec.teacher_rank, spec.d_out) / (spec.teacher_rank as f64).sqrt();
    let x = gaussian_matrix(&mut rng, spec.n_samples, spec.d_in);
    let mut y = &x * &a * &b;
    if spec.noise_std > 0.0 {
        y += gaussian_matrix(&mut rng, spec.n_samples, spec.d_out) * spec.noise_std;
    }
    if spec.kind == TaskKind::SyntheticClassification {
        let labels: Vec<usize> = y.row_iter().map(|r| r.transpose().argmax().0).collect();
        y = DMatrix::from_fn(spec.n_samples, spec.d_out, |i, j| if labels[i] == j { 1.0 } else { 0.0 });
    }
    Ok(Dataset { x, y, teacher: (a, b) })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warm-up, then cosine decay to `min_factor * lr`.
    Cosine { warmup: u64, min_factor: f64 },
}

impl LrSchedule {
    /// Learning rate at 1-based step `t` of `total`.
    pub fn lr(&self, base: f64, t: u64, total: u64) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { warmup, min_factor } => {
                if t <= warmup {
                    return base * t as f64 / warmup.max(1) as f64;
                }
                let span = total.saturating_sub(warmup).max(1) as f64;
                let progress = ((t - warmup) as f64 / span).min(1.0);
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                base * (min_factor + (1.0 - min_factor) * cos)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    /// Full-rank AdamW on every parameter.
    AdamW { lr: f64, params: AdamParams },
    /// DCT-AdamW on projected parameters.
    LowRank { hyper: Hyper, basis: BasisKind },
}

impl OptimizerConfig {
    pub fn name(&self) -> String {
        match self {
            OptimizerConfig::AdamW { .. } => "adamw".into(),
            OptimizerConfig::LowRank { hyper, .. } => hyper.projector.name().into(),
        }
    }

    fn base_lr(&self) -> f64 {
        match self {
            OptimizerConfig::AdamW { lr, .. } => *lr,
            OptimizerConfig::LowRank { hyper, .. } => hyper.lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    W1,
    W2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub activation: Activation,
    pub loss: Loss,
    /// Layers kept on the full-rank AdamW reference even under a low-rank
    /// optimizer.
    pub full_rank_layers: Vec<Layer>,
    /// Seed for model init and batch order.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub train_loss: f64,
    pub grad_fro_norm: f64,
    pub recon_error_ratio: f64,
    pub step_time_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub optimizer: String,
    pub seed: u64,
    pub status: RunStatus,
    pub diagnostic: Option<String>,
    pub steps_completed: u64,
    /// Loss over the whole training set after the last step.
    pub final_loss: f64,
    pub mean_recon_ratio: f64,
    pub wall_time_s: f64,
    pub peak_state_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<StepRecord>,
    pub summary: RunSummary,
}

impl RunMetrics {
    /// CSV with header `step,train_loss,grad_fro_norm,recon_error_ratio,step_time_us`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Seeded mini-batch order: a fresh permutation per epoch, consumed in
/// consecutive chunks. A trailing partial batch is dropped.
pub struct BatchSampler {
    order: Vec<usize>,
    batch_size: usize,
    per_epoch: usize,
    slot: usize,
    rng: crate::rng::SeededRng,
}

impl BatchSampler {
    pub fn new(n_samples: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > n_samples {
            return Err(invalid(format!("batch size {batch_size} must be in 1..={n_samples}")));
        }
        Ok(Self {
            order: (0..n_samples).collect(),
            batch_size,
            per_epoch: n_samples / batch_size,
            slot: 0,
            rng: seeded(derive_seed(seed, &[0xba7c4])),
        })
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.slot == 0 {
            self.order.shuffle(&mut self.rng);
        }
        let s = self.slot;
        self.slot = (self.slot + 1) % self.per_epoch;
        &self.order[s * self.batch_size..(s + 1) * self.batch_size]
    }
}

enum ParamOpt {
    Full(AdamMoments),
    Projected(LayerState),
}

impl ParamOpt {
    fn state_bytes(&self) -> usize {
        match self {
            ParamOpt::Full(m) => m.state_bytes(),
            ParamOpt::Projected(s) => s.state_bytes(),
        }
    }
}

/// Trains a fresh model on `data` and logs one record per step.
///
/// A non-finite loss or gradient stops the run early with
/// [`RunStatus::Diverged`]; records hold only the finite steps.
pub fn train(spec: &TaskSpec, data: &Dataset, cfg: &TrainConfig) -> Result<RunMetrics> {
    spec.validate()?;
    let mut sampler = BatchSampler::new(spec.n_samples, cfg.batch_size, cfg.seed)?;
    if cfg.steps == 0 {
        return Err(invalid("steps must be at least 1"));
    }
    let mut model = MlpModel::init(spec.d_in, spec.d_h, spec.d_out, cfg.activation, cfg.seed);
    let shapes = [(Layer::W1, model.w1.shape()), (Layer::W2, model.w2.shape())];

    let adam = match cfg.optimizer {
        OptimizerConfig::AdamW { params, .. } => params,
        OptimizerConfig::LowRank { hyper, .. } => AdamParams::from(&hyper),
    };
    adam.validate()?;
    let low_rank = match cfg.optimizer {
        OptimizerConfig::LowRank { hyper, basis } => {
            let q = Arc::new(OrthoBasis::build(basis, spec.d_h)?);
            Some(DctAdamW::new(hyper, q)?)
        }
        OptimizerConfig::AdamW { .. } => None,
    };
    let mut opts = Vec::with_capacity(2);
    for (i, (layer, (rows, cols))) in shapes.iter().enumerate() {
        opts.push(match &low_rank {
            Some(opt) if !cfg.full_rank_layers.contains(layer) => {
                ParamOpt::Projected(opt.init_state(*rows, *cols, i as u64)?)
            }
            _ => ParamOpt::Full(AdamMoments::zeros(*rows, *cols)),
        });
    }

    let base_lr = cfg.optimizer.base_lr();
    let mut records = Vec::with_capacity(cfg.steps as usize);
    let mut peak_state = opts.iter().map(ParamOpt::state_bytes).sum::<usize>();
    let mut diagnostic = None;
    let started = Instant::now();

    for t in 1..=cfg.steps {
        let rows = sampler.next_batch();
        let xb = data.x.select_rows(rows);
        let yb = data.y.select_rows(rows);
        let lr = cfg.schedule.lr(base_lr, t, cfg.steps);

        let t0 = Instant::now();
        let grads = match forward_backward(&model, &xb, &yb, cfg.loss) {
            Ok(g) => g,
            Err(e) => {
                diagnostic = Some(format!("step {t}: {e}"));
                break;
            }
        };
        let grad_norm = (grads.w1.norm_squared() + grads.w2.norm_squared()).sqrt();
        let (mut residual, mut energy) = (0.0, 0.0);
        let mut failed = None;
        for (opt, (theta, grad)) in opts
            .iter_mut()
            .zip([(&mut model.w1, &grads.w1), (&mut model.w2, &grads.w2)])
        {
            let res = match opt {
                ParamOpt::Full(mom) => adamw_reference_step(theta, grad, mom, &adam, lr),
                ParamOpt::Projected(state) => {
                    let opt = low_rank.as_ref().expect("projected layer without optimizer");
                    opt.step_with_lr(theta, grad, state, lr).map(|info| {
                        residual += info.residual_energy;
                        energy += info.grad_energy;
                    })
                }
            };
            if let Err(e) = res {
                failed = Some(e);
                break;
            }
        }
        if let Some(e) = failed {
            diagnostic = Some(format!("step {t}: {e}"));
            break;
        }
        let step_time_us = t0.elapsed().as_secs_f64() * 1e6;
        peak_state = peak_state.max(opts.iter().map(ParamOpt::state_bytes).sum());
        records.push(StepRecord {
            step: t,
            train_loss: grads.loss,
            grad_fro_norm: grad_norm,
            recon_error_ratio: if energy > 0.0 { residual / energy } else { 0.0 },
            step_time_us,
        });
    }

    let mut final_loss = evaluate(&model, &data.x, &data.y, cfg.loss);
    if diagnostic.is_none() && !final_loss.is_finite() {
        diagnostic = Some("final loss is not finite".into());
    }
    if diagnostic.is_some() {
        final_loss = records.last().map_or(f64::NAN, |r| r.train_loss);
    }
    let n = records.len().max(1) as f64;
    let summary = RunSummary {
        optimizer: cfg.optimizer.name(),
        seed: cfg.seed,
        status: if diagnostic.is_some() { RunStatus::Diverged } else { RunStatus::Completed },
        diagnostic,
        steps_completed: records.len() as u64,
        final_loss,
        mean_recon_ratio: records.iter().map(|r| r.recon_error_ratio).sum::<f64>() / n,
        wall_time_s: started.elapsed().as_secs_f64(),
        peak_state_bytes: peak_state,
    };
    Ok(RunMetrics { records, summary })
}
