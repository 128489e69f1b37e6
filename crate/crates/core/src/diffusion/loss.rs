use super::model::DenoiserModel;
use super::schedule::NoiseSchedule;
use crate::condition::Condition;
use crate::error::{CoreError, Result};
use duge_tensor::{Bound, Rng, Tape, Tensor, Var};

/// Timesteps and Gaussian noise for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub ts: Vec<usize>,
    pub eps: Tensor,
}

impl NoiseDraw {
    /// `t` uniform on `1..=T`, `eps ~ N(0, I)` shaped like `x0`.
    pub fn sample(x0: &Tensor, schedule: &NoiseSchedule, rng: &mut Rng) -> Self {
        let b = x0.shape()[0];
        let ts = (0..b).map(|_| 1 + rng.below(schedule.steps())).collect();
        let eps = Tensor::new(x0.shape(), rng.normals(x0.numel())).expect("noise shape");
        Self { ts, eps }
    }
}

/// Batch mean of the per-sample squared error `‖ε − ε̂‖²`.
pub fn noise_prediction_loss(tape: &mut Tape, pred: Var, eps: &Tensor) -> Result<Var> {
    let b = *eps.shape().first().unwrap_or(&0);
    if b == 0 {
        return Err(CoreError::Precondition("empty batch".into()));
    }
    let target = tape.constant(eps.clone());
    let mse = tape.mse(pred, target)?;
    Ok(tape.scale(mse, (eps.numel() / b) as f64)?)
}

/// Noise-prediction objective for a batch of clean images with a given draw.
#[allow(clippy::too_many_arguments)]
pub fn denoise_loss_with(
    model: &DenoiserModel,
    tape: &mut Tape,
    params: &Bound,
    x0: &Tensor,
    conds: &[Condition],
    schedule: &NoiseSchedule,
    draw: &NoiseDraw,
) -> Result<Var> {
    if conds.is_empty() {
        return Err(CoreError::Precondition("empty batch".into()));
    }
    let x_t = schedule.q_sample_batch(x0, &draw.ts, &draw.eps)?;
    let (pred, _) = model.forward(tape, params, &x_t, &draw.ts, conds, false)?;
    noise_prediction_loss(tape, pred, &draw.eps)
}

/// Noise-prediction objective with `t` and `ε` drawn from `rng`.
pub fn denoise_loss(
    model: &DenoiserModel,
    tape: &mut Tape,
    params: &Bound,
    x0: &Tensor,
    conds: &[Condition],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Var> {
    if conds.is_empty() {
        return Err(CoreError::Precondition("empty batch".into()));
    }
    let draw = NoiseDraw::sample(x0, schedule, rng);
    denoise_loss_with(model, tape, params, x0, conds, schedule, &draw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_prediction_gives_zero() {
        let mut rng = Rng::new(3);
        let eps = Tensor::randn(&[4, 16, 16], 1.0, &mut rng);
        let mut tape = Tape::new();
        let pred = tape.constant(eps.clone());
        let l = noise_prediction_loss(&mut tape, pred, &eps).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn zero_prediction_gives_image_dimension() {
        // E‖ε‖² = 256 for 16×16 images; sampling sd of the batch mean is
        // sqrt(2·256 / B).
        let mut rng = Rng::new(4);
        let b = 512;
        let eps = Tensor::randn(&[b, 16, 16], 1.0, &mut rng);
        let mut tape = Tape::new();
        let pred = tape.constant(Tensor::zeros(&[b, 16, 16]));
        let l = tape_value(&mut tape, pred, &eps);
        let sd = (2.0 * 256.0 / b as f64).sqrt();
        assert!((l - 256.0).abs() < 4.0 * sd, "{l}");
    }

    fn tape_value(tape: &mut Tape, pred: Var, eps: &Tensor) -> f64 {
        let l = noise_prediction_loss(tape, pred, eps).unwrap();
        tape.value(l).item()
    }
}
