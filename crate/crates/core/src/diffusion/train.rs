use serde::{Deserialize, Serialize};

use super::loss::denoise_loss;
use super::model::DenoiserModel;
use super::schedule::NoiseSchedule;
use crate::condition::Condition;
use crate::error::{CoreError, Result};
use duge_tensor::{adam_step, AdamConfig, AdamState, Rng, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing a label with NULL during training.
    pub cond_dropout: f64,
    /// Cosine decay from `lr` down to `lr * final_lr_fraction`.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch: 64,
            lr: 2e-3,
            cond_dropout: 0.2,
            final_lr_fraction: 0.05,
        }
    }
}

/// Cosine decay from `base` at step 0 to `base * final_fraction` at `total`.
pub fn cosine_lr(base: f64, final_fraction: f64, step: usize, total: usize) -> f64 {
    let progress = step as f64 / total.max(1) as f64;
    let lo = base * final_fraction;
    lo + 0.5 * (base - lo) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Fits the denoiser to `x0` (`[N, side, side]`, model space) with labels `conds`.
/// Returns the per-step loss curve.
pub fn train_denoiser(
    model: &mut DenoiserModel,
    x0: &Tensor,
    conds: &[Condition],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let n = conds.len();
    if n == 0 || x0.shape()[0] != n {
        return Err(CoreError::Precondition(format!(
            "training set has {} images and {} labels",
            x0.shape()[0],
            n
        )));
    }
    let per: usize = x0.shape()[1..].iter().product();
    let mut state = AdamState::new(AdamConfig::with_lr(cfg.lr), model.params.tensors());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        state.config.lr = cosine_lr(cfg.lr, cfg.final_lr_fraction, step, cfg.steps);
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.below(n)).collect();
        let mut data = Vec::with_capacity(cfg.batch * per);
        for &i in &idx {
            data.extend_from_slice(&x0.data()[i * per..(i + 1) * per]);
        }
        let mut shape = x0.shape().to_vec();
        shape[0] = cfg.batch;
        let batch = Tensor::new(&shape, data)?;
        let bc: Vec<Condition> = idx
            .iter()
            .map(|&i| {
                if rng.uniform() < cfg.cond_dropout {
                    Condition::NULL
                } else {
                    conds[i]
                }
            })
            .collect();
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, |_| true);
        let loss = denoise_loss(model, &mut tape, &p, &batch, &bc, schedule, rng)?;
        tape.backward(loss)?;
        losses.push(tape.value(loss).item());
        let grads = p.grads(&tape);
        adam_step(model.params.tensors_mut(), &grads, &mut state)?;
    }
    Ok(losses)
}
