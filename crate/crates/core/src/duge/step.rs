use serde::{Deserialize, Serialize};

use super::attention::{negative_attention, unlearning_loss};
use super::memory::{gather_rows, MemoryBank};
use super::objective::{prior_loss, weight_penalty, LambdaSchedule};
use super::plan::{DecrementalPlan, Objective};
use crate::condition::Condition;
use crate::diffusion::{DenoiserModel, NoiseDraw, NoiseSchedule};
use crate::error::{CoreError, Result};
use duge_tensor::{adam_step, AdamConfig, AdamState, Bound, ParamStore, Rng, Tape, Tensor, Var};

/// Smallest normalizer applied to L_U and L_pr.
pub const NORM_FLOOR: f64 = 1e-8;

/// Models and optimizer state of one decremental step: θ^δ is trained, φ
/// provides attention targets and θ^{δ−1} anchors the weight penalty.
#[derive(Clone, Debug)]
pub struct UnlearnStepState {
    pub theta: DenoiserModel,
    phi: DenoiserModel,
    anchor: ParamStore,
    adam: AdamState,
    pub iteration: usize,
    norms: Option<(f64, f64)>,
}

impl UnlearnStepState {
    /// θ^δ starts as an exact copy of `previous`, which also serves as φ and anchor.
    pub fn new(previous: &DenoiserModel, plan: &DecrementalPlan) -> Self {
        Self {
            theta: previous.clone(),
            phi: previous.clone(),
            anchor: previous.params.clone(),
            adam: AdamState::new(AdamConfig::with_lr(plan.lr), previous.params.tensors()),
            iteration: 0,
            norms: None,
        }
    }

    pub fn phi(&self) -> &DenoiserModel {
        &self.phi
    }

    pub fn anchor(&self) -> &ParamStore {
        &self.anchor
    }

    /// L_U and L_pr magnitudes measured at the initial parameters.
    pub fn norms(&self) -> Option<(f64, f64)> {
        self.norms
    }
}

/// Per-iteration loss terms (raw, before normalization) and weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub unlearn: f64,
    pub prior: f64,
    pub penalty: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Loss curve of one decremental step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub target: Option<Condition>,
    pub replacement: Option<Condition>,
    pub iterations: Vec<IterationLog>,
}

/// Runs `plan.iterations` DUGE iterations with the plan's λ schedule.
#[allow(clippy::too_many_arguments)]
pub fn unlearn_step(
    state: &mut UnlearnStepState,
    target: Condition,
    plan: &DecrementalPlan,
    bank: &MemoryBank,
    exemplars: &Tensor,
    schedule: &NoiseSchedule,
    rng: &Rng,
) -> Result<Vec<IterationLog>> {
    let lambdas = LambdaSchedule::from_plan(plan);
    unlearn_step_weighted(state, target, plan, bank, exemplars, schedule, rng, |i| {
        lambdas.weights(i)
    })
}

/// [`unlearn_step`] with explicit `(λ_1, λ_2, λ_3)` per iteration. Terms the
/// plan's objective drops are not computed at all.
#[allow(clippy::too_many_arguments)]
pub fn unlearn_step_weighted(
    state: &mut UnlearnStepState,
    target: Condition,
    plan: &DecrementalPlan,
    bank: &MemoryBank,
    exemplars: &Tensor,
    schedule: &NoiseSchedule,
    rng: &Rng,
    weights: impl Fn(usize) -> (f64, f64, f64),
) -> Result<Vec<IterationLog>> {
    if target.is_null() {
        return Err(CoreError::Config("cannot unlearn the NULL condition".into()));
    }
    let e = exemplars.shape().first().copied().unwrap_or(0);
    if e == 0 {
        return Err(CoreError::Precondition("no exemplars for the target concept".into()));
    }
    let use_prior = plan.objective == Objective::Full;
    if use_prior && bank.is_empty() {
        return Err(CoreError::Precondition("memory bank is empty".into()));
    }
    let use_penalty = plan.objective != Objective::UnlearnOnly;
    let trainable = plan.trainable;
    let mut logs = Vec::with_capacity(plan.iterations);

    let state_phi = &state.phi;
    let terms = |theta: &DenoiserModel, tape: &mut Tape, p: &Bound, r: &mut Rng| -> Result<(Var, Option<Var>)> {
        let b = plan.exemplar_batch;
        let idx: Vec<usize> = (0..b).map(|_| r.below(e)).collect();
        let x0 = gather_rows(exemplars, &idx);
        let draw = NoiseDraw::sample(&x0, schedule, r);
        let x_t = schedule.q_sample_batch(&x0, &draw.ts, &draw.eps)?;

        // Frozen pass: target and NULL conditions on the same x_t, t.
        let both = Tensor::cat_outer(&[x_t.clone(), x_t.clone()])?;
        let mut ts2 = draw.ts.clone();
        ts2.extend_from_slice(&draw.ts);
        let mut conds2 = vec![target; b];
        conds2.extend(std::iter::repeat_n(Condition::NULL, b));
        let (_, maps) = state_phi.forward_with_probes(&both, &ts2, &conds2)?;
        let a_c = maps.slice_batch(0, b)?;
        let a_u = maps.slice_batch(b, 2 * b)?;
        let a_n = negative_attention(&a_c, &a_u)?;

        let (_, probe) = theta.forward(tape, p, &x_t, &draw.ts, &vec![target; b], true)?;
        let l_u = unlearning_loss(tape, &probe.maps, &a_n)?;
        let l_pr = if use_prior {
            let midx: Vec<usize> = (0..plan.memory_batch).map(|_| r.below(bank.len())).collect();
            Some(prior_loss(theta, tape, p, bank, &midx, schedule, r)?)
        } else {
            None
        };
        Ok((l_u, l_pr))
    };

    if state.norms.is_none() {
        // Mean magnitudes at the initial parameters over independent draws.
        let (mut su, mut spr) = (0.0, 0.0);
        let draws = plan.norm_draws;
        for k in 0..draws {
            let mut r = rng.split_named("norm").split(k as u64);
            let mut tape = Tape::new();
            let p = state.theta.params.bind(&mut tape, |_| false);
            let (l_u, l_pr) = terms(&state.theta, &mut tape, &p, &mut r)?;
            su += tape.value(l_u).item();
            spr += l_pr.map(|v| tape.value(v).item()).unwrap_or(0.0);
        }
        let n = draws as f64;
        state.norms = Some(((su / n).abs().max(NORM_FLOOR), (spr / n).abs().max(NORM_FLOOR)));
    }
    let (nu, npr) = state.norms.expect("normalizers set above");

    for _ in 0..plan.iterations {
        let i = state.iteration;
        let (l1, l2, l3) = weights(i);
        let mut r = rng.split(i as u64);

        let mut tape = Tape::new();
        let p = state.theta.params.bind(&mut tape, |n| trainable.selects(n));
        let (l_u, l_pr) = terms(&state.theta, &mut tape, &p, &mut r)?;
        let r_pr = if use_penalty {
            Some(weight_penalty(&mut tape, &p, &state.theta.params, &state.anchor)?)
        } else {
            None
        };

        let value = |tape: &Tape, v: Option<Var>| v.map(|v| tape.value(v).item()).unwrap_or(0.0);
        let (vu, vpr, vr) = (
            tape.value(l_u).item(),
            value(&tape, l_pr),
            value(&tape, r_pr),
        );

        let mut total = tape.scale(l_u, l1 / nu)?;
        if let Some(l) = l_pr {
            let s = tape.scale(l, l2 / npr)?;
            total = tape.add(total, s)?;
        }
        if let Some(rp) = r_pr {
            let s = tape.scale(rp, l3)?;
            total = tape.add(total, s)?;
        }
        let vt = tape.value(total).item();
        if !vt.is_finite() {
            return Err(CoreError::NonFiniteLoss {
                iteration: i,
                unlearn: vu,
                prior: vpr,
                penalty: vr,
            });
        }
        tape.backward(total)?;
        let grads = p.grads(&tape);
        adam_step(state.theta.params.tensors_mut(), &grads, &mut state.adam)?;
        logs.push(IterationLog {
            iteration: i,
            unlearn: vu,
            prior: vpr,
            penalty: vr,
            total: vt,
            lambda1: l1,
            lambda2: l2,
        });
        state.iteration += 1;
    }
    Ok(logs)
}
