//! Momentum SGD with L2 weight decay, the plateau learning-rate schedule,
//! and the epoch loop.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::layers::LayerParams;
use crate::network::{self, FreezeMask, ForwardOptions, NetworkSpec, ParamSet};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Multiplier applied to the learning rate on a plateau.
    pub lr_factor: f64,
    /// Epochs without improvement before the learning rate decays.
    pub patience: usize,
    pub min_lr: f64,
    pub improvement_epsilon: f64,
    /// Apply weight decay to biases as well as weights.
    pub decay_biases: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-3,
            batch_size: 256,
            lr_factor: 0.1,
            patience: 1,
            min_lr: 1e-5,
            improvement_epsilon: 1e-4,
            decay_biases: false,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad("lr_factor must lie in (0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.min_lr.is_nan() || self.min_lr < 0.0 || self.improvement_epsilon.is_nan() || self.improvement_epsilon < 0.0 {
            return bad("min_lr and improvement_epsilon must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    /// One velocity pair per trainable layer, shaped like its parameters.
    pub velocity: ParamSet,
    pub lr: f64,
    pub best_accuracy: f64,
    pub epochs_since_improvement: usize,
    /// SGD steps taken so far; keys the per-step dropout stream.
    pub step: u64,
    /// Completed epochs; keys the per-epoch shuffle stream.
    pub epoch: u64,
}

impl OptState {
    pub fn new(params: &ParamSet, mask: &FreezeMask, cfg: &SgdConfig) -> Result<Self> {
        let mut velocity = ParamSet::new();
        for name in mask.trainable() {
            let p = params
                .get(name)
                .ok_or_else(|| Error::State(format!("{name}: trainable layer has no parameters")))?;
            velocity.insert(
                name,
                LayerParams {
                    weight: Tensor::zeros(p.weight.shape())?,
                    bias: Tensor::zeros(p.bias.shape())?,
                },
            );
        }
        Ok(OptState {
            velocity,
            lr: cfg.lr0,
            best_accuracy: f64::NEG_INFINITY,
            epochs_since_improvement: 0,
            step: 0,
            epoch: 0,
        })
    }
}

fn update(w: &mut Tensor, v: &mut Tensor, g: &Tensor, mu: f32, lr: f32, decay: f32) {
    for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
        *vi = mu * *vi - lr * (gi + decay * *wi);
        *wi += *vi;
    }
}

/// One momentum step on every trainable tensor:
/// `v ← μ·v − η·(g + λ·w)`, `w ← w + v`. Frozen tensors are not touched.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    mask: &FreezeMask,
    state: &mut OptState,
    cfg: &SgdConfig,
) -> Result<()> {
    let trainable: Vec<&str> = mask.trainable().collect();
    if let Some(extra) = grads.names().find(|n| !mask.is_trainable(n)) {
        return Err(Error::State(format!("{extra}: gradient supplied for a frozen layer")));
    }
    // Validate everything before mutating anything.
    for &name in &trainable {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::State(format!("{name}: missing gradient for a trainable layer")))?;
        let p = params
            .get(name)
            .ok_or_else(|| Error::State(format!("{name}: trainable layer has no parameters")))?;
        let v = state
            .velocity
            .get(name)
            .ok_or_else(|| Error::State(format!("{name}: no optimizer velocity")))?;
        for (a, b, c) in [(&p.weight, &g.weight, &v.weight), (&p.bias, &g.bias, &v.bias)] {
            if a.shape() != b.shape() || a.shape() != c.shape() {
                return Err(Error::State(format!("{name}: gradient or velocity shape mismatch")));
            }
        }
    }
    let mu = cfg.momentum as f32;
    let lr = state.lr as f32;
    let wd = cfg.weight_decay as f32;
    let bias_wd = if cfg.decay_biases { wd } else { 0.0 };
    for name in trainable {
        let g = grads.get(name).expect("validated");
        let p = params.get_mut(name).expect("validated");
        let v = state.velocity.get_mut(name).expect("validated");
        update(&mut p.weight, &mut v.weight, &g.weight, mu, lr, wd);
        update(&mut p.bias, &mut v.bias, &g.bias, mu, lr, bias_wd);
    }
    state.step += 1;
    Ok(())
}

/// Decays the learning rate after `patience` epochs without a validation
/// accuracy gain larger than `improvement_epsilon`. The rate never rises and
/// never drops below `min_lr`.
pub fn plateau_update(state: &mut OptState, accuracy: f64, cfg: &SgdConfig) {
    if accuracy > state.best_accuracy + cfg.improvement_epsilon {
        state.best_accuracy = accuracy;
        state.epochs_since_improvement = 0;
        return;
    }
    state.epochs_since_improvement += 1;
    if state.epochs_since_improvement >= cfg.patience {
        state.lr = (state.lr * cfg.lr_factor).max(cfg.min_lr).min(state.lr);
        state.epochs_since_improvement = 0;
    }
}

/// One pass over `batches`: forward, loss, backward and an SGD step per
/// batch. Returns the mean per-example loss.
///
/// Dropout masks for step `s` come from `rng.fork(DROPOUT).fork(s)`, so a
/// run resumed from a saved [`OptState`] replays the same masks.
pub fn train_epoch<I>(
    spec: &NetworkSpec,
    params: &mut ParamSet,
    mask: &FreezeMask,
    state: &mut OptState,
    cfg: &SgdConfig,
    batches: I,
    rng: &Rng,
) -> Result<f64>
where
    I: IntoIterator<Item = Result<Batch>>,
{
    cfg.validate()?;
    mask.check_against(spec)?;
    let retain_from = network::first_trainable(spec, mask).unwrap_or(usize::MAX);
    let dropout = rng.fork(stream::DROPOUT);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for batch in batches {
        let batch = batch?;
        let opts = ForwardOptions {
            retain_from,
            ..ForwardOptions::train(&batch.labels)
        };
        let mut step_rng = dropout.fork(state.step);
        let pass = network::forward_with(spec, params, &batch.images, &opts, &mut step_rng)?;
        let loss = pass.loss.expect("train forward with labels yields a loss");
        let grads = network::backward(spec, params, &pass, &batch.labels, mask)?;
        sgd_step(params, &grads, mask, state, cfg)?;
        total += loss * batch.labels.len() as f64;
        count += batch.labels.len();
    }
    if count == 0 {
        return Err(Error::Input("training epoch received no examples".into()));
    }
    state.epoch += 1;
    Ok(total / count as f64)
}
