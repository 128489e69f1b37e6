use super::memory::{gather_rows, generate_exemplars};
use super::plan::DecrementalPlan;
use super::step::IterationLog;
use crate::condition::Condition;
use crate::diffusion::{denoise_loss, DenoiserModel, NoiseSchedule, SamplerConfig};
use crate::error::{CoreError, Result};
use duge_tensor::{adam_step, AdamConfig, AdamState, Rng, Tape};

/// Replacement for `target`: the plan's explicit pairing if present, otherwise
/// a class outside the plan drawn from `rng.split(target)`.
pub fn choose_replacement(
    target: Condition,
    plan: &DecrementalPlan,
    num_classes: usize,
    rng: &Rng,
) -> Result<Condition> {
    if let Some(r) = plan.replacements.iter().find(|r| r.target == target) {
        return Ok(r.replacement);
    }
    let eligible: Vec<Condition> = plan
        .retained(num_classes)
        .into_iter()
        .filter(|&c| c != target)
        .collect();
    if eligible.is_empty() {
        return Err(CoreError::Plan(format!(
            "no replacement class available for {target}"
        )));
    }
    Ok(eligible[rng.split(target.id() as u64).below(eligible.len())])
}

/// Fine-tunes `previous` so that `target` produces images of `replacement`
/// generated by `source`, using the same iteration budget and per-iteration
/// image count as a DUGE step. Every parameter is trained at `plan.naive_lr`.
#[allow(clippy::too_many_arguments)]
pub fn naive_unlearn(
    previous: &DenoiserModel,
    target: Condition,
    replacement: Condition,
    source: &DenoiserModel,
    plan: &DecrementalPlan,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    rng: &Rng,
) -> Result<(DenoiserModel, Vec<IterationLog>)> {
    if replacement == target || replacement.is_null() || plan.contains(replacement) {
        return Err(CoreError::Config(format!(
            "replacement {replacement} for {target} must be a class outside the decremental set"
        )));
    }
    let images = generate_exemplars(
        source,
        replacement,
        plan,
        schedule,
        sampler,
        &rng.split_named("replacement-images"),
    )?;
    let n = images.shape()[0];
    let batch = plan.exemplar_batch + plan.memory_batch;
    let mut theta = previous.clone();
    let mut adam = AdamState::new(AdamConfig::with_lr(plan.naive_lr), theta.params.tensors());
    let mut logs = Vec::with_capacity(plan.iterations);
    for i in 0..plan.iterations {
        let mut r = rng.split(i as u64);
        let idx: Vec<usize> = (0..batch).map(|_| r.below(n)).collect();
        let x0 = gather_rows(&images, &idx);
        let mut tape = Tape::new();
        let p = theta.params.bind(&mut tape, |_| true);
        let loss = denoise_loss(&theta, &mut tape, &p, &x0, &vec![target; batch], schedule, &mut r)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(CoreError::NonFiniteLoss {
                iteration: i,
                unlearn: v,
                prior: 0.0,
                penalty: 0.0,
            });
        }
        tape.backward(loss)?;
        let grads = p.grads(&tape);
        adam_step(theta.params.tensors_mut(), &grads, &mut adam)?;
        logs.push(IterationLog {
            iteration: i,
            unlearn: v,
            prior: 0.0,
            penalty: 0.0,
            total: v,
            lambda1: 1.0,
            lambda2: 0.0,
        });
    }
    Ok((theta, logs))
}
