//! Minibatch Adam training of the flow under the pull-back likelihood.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{nll_loss, nll_loss_grad, FlowConfig};
use crate::nn::{DeepSetArch, DeepSetPotential, FlowModel, KineticScale, ParamGradient, Parameters};
use crate::phase::{derive_seed, RngState, SnapshotSeries};

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const INIT_STREAM: u64 = 0x494e_4954;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", "must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &impl Parameters) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn check_shapes(&self, params: &[&[f64]]) -> Result<()> {
        let ok = self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| p.len() == m.len() && p.len() == v.len());
        if !ok {
            return Err(Error::ShapeMismatch("Adam moments do not match the parameters".into()));
        }
        Ok(())
    }
}

/// Bias-corrected Adam update of `params` in place.
pub fn adam_step<P: Parameters, G: Parameters>(
    params: &mut P,
    grads: &G,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let g = grads.tensors();
    {
        let p = params.tensors();
        state.check_shapes(&p)?;
        if g.len() != p.len() || g.iter().zip(&p).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::ShapeMismatch("gradient does not match the parameters".into()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(g)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub flow: FlowConfig,
    /// Emit a checkpoint event every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Global-norm gradient clip; `None` disables.
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        self.adam.validate()?;
        self.flow.validate()?;
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("clip_norm", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Random potential (seeded) with kinetic scale `init_a`.
pub fn init_model(arch: &DeepSetArch, init_a: f64, seed: u64) -> Result<FlowModel> {
    let mut rng = RngState::new(derive_seed(seed, INIT_STREAM, 0));
    Ok(FlowModel {
        potential: DeepSetPotential::init(arch, &mut rng)?,
        kinetic: KineticScale::from_a(init_a)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkipRecord {
    pub epoch: usize,
    pub example: usize,
    pub reason: String,
}

/// Mean loss and gradient over one minibatch.
#[derive(Clone, Debug)]
pub struct BatchResult {
    pub loss: f64,
    pub grad: ParamGradient,
    pub used: usize,
    /// `(example index, error)` of skipped examples.
    pub skipped: Vec<(usize, String)>,
}

/// Per-example losses and gradients, reduced in `indices` order.
pub fn batch_loss_grad(
    model: &FlowModel,
    data: &[SnapshotSeries],
    indices: &[usize],
    flow: &FlowConfig,
) -> Result<BatchResult> {
    let results: Vec<Result<(f64, ParamGradient)>> = indices
        .par_iter()
        .map(|&i| nll_loss_grad(data[i].last(), &data[i].spec, model, flow))
        .collect();
    let mut grad = ParamGradient::zeros_like(model);
    let mut loss = 0.0;
    let mut used = 0;
    let mut skipped = Vec::new();
    for (&i, r) in indices.iter().zip(results) {
        match r {
            Ok((l, g)) => {
                loss += l;
                grad.add_scaled(&g, 1.0);
                used += 1;
            }
            Err(e @ Error::Diverged { .. }) => skipped.push((i, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    if skipped.len() * 10 > indices.len() {
        return Err(Error::BatchDiverged {
            diverged: skipped.len(),
            batch: indices.len(),
        });
    }
    if used > 0 {
        loss /= used as f64;
        grad.scale(1.0 / used as f64);
    }
    Ok(BatchResult {
        loss,
        grad,
        used,
        skipped,
    })
}

/// Mean loss over a dataset; divergent examples are skipped and counted.
pub fn mean_loss(model: &FlowModel, data: &[SnapshotSeries], flow: &FlowConfig) -> Result<(f64, usize)> {
    let results: Vec<Result<f64>> = data
        .par_iter()
        .map(|ex| nll_loss(ex.last(), &ex.spec, model, flow).map(|(l, _)| l))
        .collect();
    let mut sum = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for r in results {
        match r {
            Ok(l) => {
                sum += l;
                used += 1;
            }
            Err(Error::Diverged { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Ok((f64::INFINITY, skipped));
    }
    Ok((sum / used as f64, skipped))
}

/// One row of the metrics log. Epoch 0 describes the initial model.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub a: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss seen.
    pub best: FlowModel,
    pub best_epoch: usize,
    pub last: FlowModel,
    pub adam: AdamState,
    pub metrics: Vec<EpochMetrics>,
    pub skipped: Vec<SkipRecord>,
}

/// Callback invoked after each epoch with the metrics row, the current
/// parameters and optimizer state, and whether a checkpoint is due.
pub trait EpochObserver {
    fn epoch_end(&mut self, metrics: &EpochMetrics, model: &FlowModel, adam: &AdamState, checkpoint: bool) -> Result<()>;
}

impl<F> EpochObserver for F
where
    F: FnMut(&EpochMetrics, &FlowModel, &AdamState, bool) -> Result<()>,
{
    fn epoch_end(&mut self, metrics: &EpochMetrics, model: &FlowModel, adam: &AdamState, checkpoint: bool) -> Result<()> {
        self(metrics, model, adam, checkpoint)
    }
}

/// Does nothing.
pub struct Quiet;

impl EpochObserver for Quiet {
    fn epoch_end(&mut self, _: &EpochMetrics, _: &FlowModel, _: &AdamState, _: bool) -> Result<()> {
        Ok(())
    }
}

/// Trains `init` on the final snapshots of `train_set`.
pub fn train(
    train_set: &[SnapshotSeries],
    val_set: &[SnapshotSeries],
    init: FlowModel,
    cfg: &TrainConfig,
    observer: &mut dyn EpochObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let start = Instant::now();
    let mut model = init;
    let mut adam = AdamState::new(&model);
    let mut metrics = Vec::with_capacity(cfg.epochs + 1);
    let mut skipped = Vec::new();

    let (train0, _) = mean_loss(&model, train_set, &cfg.flow)?;
    let (val0, _) = mean_loss(&model, val_set, &cfg.flow)?;
    let row = EpochMetrics {
        epoch: 0,
        train_loss: train0,
        val_loss: val0,
        a: model.kinetic.a(),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    log::info!("epoch 0: train {train0:.6} val {val0:.6} a {:.4}", row.a);
    observer.epoch_end(&row, &model, &adam, false)?;
    metrics.push(row);
    let mut best = (val0, 0, model.clone());

    for epoch in 1..=cfg.epochs {
        let order = RngState::new(derive_seed(cfg.seed, SHUFFLE_STREAM, epoch as u64)).permutation(train_set.len());
        let mut loss_sum = 0.0;
        let mut used = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut r = batch_loss_grad(&model, train_set, batch, &cfg.flow)?;
            for (example, reason) in r.skipped.drain(..) {
                log::warn!("epoch {epoch}: skipped example {example}: {reason}");
                skipped.push(SkipRecord { epoch, example, reason });
            }
            if r.used == 0 {
                continue;
            }
            if let Some(limit) = cfg.clip_norm {
                let norm = r.grad.squared_norm().sqrt();
                if norm > limit {
                    r.grad.scale(limit / norm);
                }
            }
            adam_step(&mut model, &r.grad, &mut adam, &cfg.adam)?;
            loss_sum += r.loss * r.used as f64;
            used += r.used;
        }
        let train_loss = if used > 0 { loss_sum / used as f64 } else { f64::NAN };
        let (val_loss, _) = mean_loss(&model, val_set, &cfg.flow)?;
        let row = EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            a: model.kinetic.a(),
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6} a {:.4}", row.a);
        if val_loss < best.0 {
            best = (val_loss, epoch, model.clone());
        }
        let due = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
        observer.epoch_end(&row, &model, &adam, due)?;
        metrics.push(row);
    }

    Ok(TrainOutcome {
        best: best.2,
        best_epoch: best.1,
        last: model,
        adam,
        metrics,
        skipped,
    })
}
